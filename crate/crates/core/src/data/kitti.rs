//! KITTI tracking layout: `velodyne/SSSS/FFFFFF.bin`, `label_02/SSSS.txt`
//! and `calib/SSSS.txt` under one root.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box7, PointCloud};

const POINT_BYTES: usize = 16;

/// Reads little-endian `f32` quadruples `(x, y, z, intensity)`; intensity
/// becomes a one-column feature.
pub fn read_velodyne(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_velodyne(&bytes, path)
}

pub fn parse_velodyne(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() % POINT_BYTES != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % POINT_BYTES) as u64,
            reason: format!("{} trailing bytes after the last full point", bytes.len() % POINT_BYTES),
        });
    }
    let n = bytes.len() / POINT_BYTES;
    let mut coords = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(POINT_BYTES).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let p = [f(0) as f64, f(1) as f64, f(2) as f64];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (i * POINT_BYTES) as u64,
                reason: "non-finite coordinate".into(),
            });
        }
        coords.push(p);
        intensity.push(f(3) as f64);
    }
    PointCloud::with_features(coords, 1, intensity)
}

pub fn encode_velodyne(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * POINT_BYTES);
    for (i, p) in pc.coords.iter().enumerate() {
        let inten = pc.features.as_ref().map_or(0.0, |f| f.data[i * f.width]);
        for v in [p[0], p[1], p[2], inten] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_velodyne(pc: &PointCloud, path: &Path) -> Result<()> {
    write_file(path, &encode_velodyne(pc))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

type Mat3 = [[f64; 3]; 3];

/// Rigid camera-from-velodyne transform after rectification.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calib {
    pub rect: Mat3,
    /// Rows of the 3×4 `Tr_velo_cam` matrix.
    pub velo_to_cam: [[f64; 4]; 3],
}

impl Default for Calib {
    /// Axis permutation between the velodyne (x forward, y left, z up) and
    /// camera (x right, y down, z forward) conventions.
    fn default() -> Self {
        Calib {
            rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            velo_to_cam: [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
        }
    }
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    [0, 1, 2].map(|r| [0, 1, 2].map(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum()))
}

fn inverse(m: &Mat3) -> Option<Mat3> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let cof = |r: usize, c: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (c1, c2) = ((c + 1) % 3, (c + 2) % 3);
        m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]
    };
    Some([0, 1, 2].map(|r| [0, 1, 2].map(|c| cof(c, r) / det)))
}

impl Calib {
    fn linear(&self) -> (Mat3, [f64; 3]) {
        let r = [0, 1, 2].map(|i| [0, 1, 2].map(|j| self.velo_to_cam[i][j]));
        let t = [0, 1, 2].map(|i| self.velo_to_cam[i][3]);
        (mat_mul(&self.rect, &r), mat_vec(&self.rect, t))
    }

    pub fn velo_to_rect(&self, p: [f64; 3]) -> [f64; 3] {
        let (m, t) = self.linear();
        let q = mat_vec(&m, p);
        [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
    }

    pub fn rect_to_velo(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let (m, t) = self.linear();
        let inv = inverse(&m).ok_or_else(|| Error::Parameter("singular calibration".into()))?;
        Ok(mat_vec(&inv, [p[0] - t[0], p[1] - t[1], p[2] - t[2]]))
    }

    fn rect_dir_to_velo(&self, d: [f64; 3]) -> Result<[f64; 3]> {
        let (m, _) = self.linear();
        let inv = inverse(&m).ok_or_else(|| Error::Parameter("singular calibration".into()))?;
        Ok(mat_vec(&inv, d))
    }

    fn velo_dir_to_rect(&self, d: [f64; 3]) -> [f64; 3] {
        mat_vec(&self.linear().0, d)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Calib> {
        let mut rect = None;
        let mut tr = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else { continue };
            let key = key.trim_end_matches(':');
            let vals: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let err = |reason: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            match key {
                "R_rect" | "R0_rect" => {
                    let v = vals.map_err(|e| err(e.to_string()))?;
                    if v.len() != 9 {
                        return Err(err(format!("{key} needs 9 values, found {}", v.len())));
                    }
                    rect = Some([0, 1, 2].map(|r| [v[3 * r], v[3 * r + 1], v[3 * r + 2]]));
                }
                "Tr_velo_cam" | "Tr_velo_to_cam" => {
                    let v = vals.map_err(|e| err(e.to_string()))?;
                    if v.len() != 12 {
                        return Err(err(format!("{key} needs 12 values, found {}", v.len())));
                    }
                    tr = Some([0, 1, 2].map(|r| [v[4 * r], v[4 * r + 1], v[4 * r + 2], v[4 * r + 3]]));
                }
                _ => {}
            }
        }
        let missing = |what: &str| Error::Parse {
            path: path.to_path_buf(),
            line: text.lines().count(),
            reason: format!("missing {what}"),
        };
        Ok(Calib {
            rect: rect.ok_or_else(|| missing("R_rect"))?,
            velo_to_cam: tr.ok_or_else(|| missing("Tr_velo_cam"))?,
        })
    }

    pub fn load(path: &Path) -> Result<Calib> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Calib::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let rect: Vec<f64> = self.rect.iter().flatten().copied().collect();
        let tr: Vec<f64> = self.velo_to_cam.iter().flatten().copied().collect();
        format!("R_rect {}\nTr_velo_cam {}\n", fmt(&rect), fmt(&tr))
    }

    /// Converts a camera-frame annotation into a velodyne-frame box. KITTI
    /// places the location at the bottom face center and measures the
    /// heading about the camera y axis; the KITTI length runs along the
    /// heading and becomes `Box7::w`.
    pub fn label_to_box(&self, l: &Label) -> Result<Box7> {
        let center = self.rect_to_velo([l.location[0], l.location[1] - l.dims[0] / 2.0, l.location[2]])?;
        let dir = self.rect_dir_to_velo([l.rotation_y.cos(), 0.0, -l.rotation_y.sin()])?;
        Box7::new(center, [l.dims[2], l.dims[1], l.dims[0]], dir[1].atan2(dir[0]))
    }

    /// Inverse of [`Calib::label_to_box`] for the geometric fields.
    pub fn box_to_label(&self, b: &Box7, frame: usize, track_id: i64, kind: &str) -> Label {
        let c = self.velo_to_rect(b.center());
        let d = self.velo_dir_to_rect([b.yaw.cos(), b.yaw.sin(), 0.0]);
        Label {
            frame,
            track_id,
            kind: kind.to_string(),
            dims: [b.h, b.l, b.w],
            location: [c[0], c[1] + b.h / 2.0, c[2]],
            rotation_y: normalize_angle((-d[2]).atan2(d[0])),
        }
    }
}

/// One line of a KITTI tracking label file (geometric fields only).
#[derive(Clone, Debug, PartialEq)]
pub struct Label {
    pub frame: usize,
    pub track_id: i64,
    pub kind: String,
    /// Height, width, length in meters.
    pub dims: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
}

impl Label {
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} 0 0 -10 -1 -1 -1 -1 {:e} {:e} {:e} {:e} {:e} {:e} {:e}",
            self.frame,
            self.track_id,
            self.kind,
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.location[0],
            self.location[1],
            self.location[2],
            self.rotation_y
        )
    }
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<Label>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        if f.len() < 17 {
            return Err(err(format!("expected at least 17 fields, found {}", f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| err(format!("field {}: {e}", k + 1)));
        out.push(Label {
            frame: f[0].parse().map_err(|e| err(format!("frame: {e}")))?,
            track_id: f[1].parse().map_err(|e| err(format!("track id: {e}")))?,
            kind: f[2].to_string(),
            dims: [num(10)?, num(11)?, num(12)?],
            location: [num(13)?, num(14)?, num(15)?],
            rotation_y: num(16)?,
        });
    }
    Ok(out)
}

pub fn load_labels(path: &Path) -> Result<Vec<Label>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

pub fn velodyne_path(root: &Path, seq: u32, frame: usize) -> PathBuf {
    root.join("velodyne").join(format!("{seq:04}")).join(format!("{frame:06}.bin"))
}

pub fn label_path(root: &Path, seq: u32) -> PathBuf {
    root.join("label_02").join(format!("{seq:04}.txt"))
}

pub fn calib_path(root: &Path, seq: u32) -> PathBuf {
    root.join("calib").join(format!("{seq:04}.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_known_points() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, -4.0, 5.5, 0.25, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let pc = parse_velodyne(&bytes, Path::new("a.bin")).unwrap();
        assert_eq!(pc.coords, vec![[1.0, 2.0, 3.0], [-4.0, 5.5, 0.25]]);
        assert_eq!(pc.features.unwrap().data, vec![0.5, 1.0]);
        assert!(parse_velodyne(&[], Path::new("e.bin")).unwrap().is_empty());
    }

    #[test]
    fn truncation_reports_offset() {
        let err = parse_velodyne(&[0u8; 37], Path::new("t.bin")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 32, .. }), "{err}");
    }

    #[test]
    fn label_round_trip() {
        let calib = Calib::default();
        let b = Box7::new([12.0, -3.0, -0.8], [4.2, 1.7, 1.5], 0.6).unwrap();
        let label = calib.box_to_label(&b, 3, 7, "Car");
        let text = label.to_line();
        let parsed = parse_labels(&text, Path::new("l")).unwrap();
        let back = calib.label_to_box(&parsed[0]).unwrap();
        for (x, y) in [back.x, back.y, back.z, back.w, back.l, back.h, back.yaw]
            .iter()
            .zip([b.x, b.y, b.z, b.w, b.l, b.h, b.yaw])
        {
            assert!((x - y).abs() < 1e-9, "{back:?} vs {b:?}");
        }
    }

    #[test]
    fn calib_text_round_trip() {
        let c = Calib::default();
        assert_eq!(Calib::parse(&c.to_text(), Path::new("c")).unwrap(), c);
        let err = Calib::parse("R_rect 1 0 0\n", Path::new("c")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
