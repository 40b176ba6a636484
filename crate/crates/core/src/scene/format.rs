//! Little-endian `.nclr` scene files and the dataset manifest.
//!
//! Layout: `"NCLR"`, u32 version, u32 N, u32 H', u32 W', f64×4 (fx, fy, cx,
//! cy), f64×12 raw pose (row-major R then t), f64×3N points, u8×N point
//! overlap, u8×H'W' pixel overlap, f64×2N ground-truth projections.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SceneConfig, SceneSample};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};

pub const SCENE_MAGIC: &[u8; 4] = b"NCLR";
pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn scene_file_name(index: usize) -> String {
    format!("sample_{index:06}.nclr")
}

pub fn encode_scene(s: &SceneSample) -> Vec<u8> {
    let n = s.num_points();
    let mut buf = Vec::with_capacity(64 + n * 43 + s.num_pixels());
    buf.extend_from_slice(SCENE_MAGIC);
    for v in [
        SCENE_FORMAT_VERSION,
        n as u32,
        s.grid_height() as u32,
        s.grid_width() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let k = &s.intrinsics;
    let floats = [k.fx, k.fy, k.cx, k.cy]
        .into_iter()
        .chain(s.raw_pose.to_array())
        .chain(s.points.data().iter().copied());
    for v in floats {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(s.point_overlap.iter().map(|&b| b as u8));
    buf.extend(s.pixel_overlap.iter().map(|&b| b as u8));
    for v in s.gt_projection.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn flags(&mut self, n: usize) -> Result<Vec<bool>> {
        self.take(n)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(self.err(format!("overlap flag byte {other} is not 0/1"))),
            })
            .collect()
    }

    fn err(&self, msg: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg,
        }
    }
}

pub fn decode_scene(bytes: &[u8], path: &Path) -> Result<SceneSample> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != SCENE_MAGIC {
        return Err(r.err("bad magic, expected NCLR".into()));
    }
    let version = r.u32()?;
    if version != SCENE_FORMAT_VERSION {
        return Err(Error::Version(format!(
            "{}: scene format version {version}, expected {SCENE_FORMAT_VERSION}",
            path.display()
        )));
    }
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let k = r.f64s(4)?;
    let intrinsics = CameraIntrinsics::new(k[0], k[1], k[2], k[3], w, h)
        .map_err(|e| r.err(format!("invalid intrinsics: {e}")))?;
    let pose: [f64; 12] = r.f64s(12)?.try_into().unwrap();
    let points = Matrix::from_vec(n, 3, r.f64s(3 * n)?)?;
    let point_overlap = r.flags(n)?;
    let pixel_overlap = r.flags(h * w)?;
    let gt_projection = Matrix::from_vec(n, 2, r.f64s(2 * n)?)?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(SceneSample {
        points,
        intrinsics,
        raw_pose: RigidPose::from_array(&pose),
        point_overlap,
        pixel_overlap,
        gt_projection,
    })
}

pub fn write_scene(path: &Path, s: &SceneSample) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_scene(s))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<SceneSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scene(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub n_points: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub overlap_points: usize,
    pub overlap_pixels: usize,
}

impl ManifestEntry {
    pub fn describe(file: String, s: &SceneSample) -> Self {
        ManifestEntry {
            file,
            n_points: s.num_points(),
            grid_height: s.grid_height(),
            grid_width: s.grid_width(),
            overlap_points: s.point_overlap.iter().filter(|&&b| b).count(),
            overlap_pixels: s.pixel_overlap.iter().filter(|&&b| b).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub count: usize,
    pub seed: u64,
    pub config: SceneConfig,
    pub samples: Vec<ManifestEntry>,
}

pub fn write_dataset(
    dir: &Path,
    scenes: &[SceneSample],
    config: &SceneConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let name = scene_file_name(i);
        write_scene(&dir.join(&name), s)?;
        samples.push(ManifestEntry::describe(name, s));
    }
    let manifest = DatasetManifest {
        format_version: SCENE_FORMAT_VERSION,
        count: scenes.len(),
        seed,
        config: config.clone(),
        samples,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        msg: e.to_string(),
    })
}

/// Reads every scene listed in the manifest, checking headers against it.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    let manifest = read_manifest(dir)?;
    if manifest.samples.len() != manifest.count {
        return Err(Error::Format {
            path: dir.join(MANIFEST_FILE),
            msg: format!(
                "count {} but {} entries",
                manifest.count,
                manifest.samples.len()
            ),
        });
    }
    let mut scenes = Vec::with_capacity(manifest.count);
    for entry in &manifest.samples {
        let path: PathBuf = dir.join(&entry.file);
        let s = read_scene(&path)?;
        if ManifestEntry::describe(entry.file.clone(), &s) != *entry {
            return Err(Error::Format {
                path,
                msg: "header disagrees with manifest".into(),
            });
        }
        scenes.push(s);
    }
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> SceneSample {
        let cfg = SceneConfig {
            n_points: 20,
            grid_height: 6,
            grid_width: 9,
            focal: 9.0,
            ..SceneConfig::default()
        };
        generate_scene(&mut ChaCha8Rng::seed_from_u64(4), &cfg).unwrap()
    }

    #[test]
    fn header_layout_is_exact() {
        let s = sample();
        let bytes = encode_scene(&s);
        assert_eq!(&bytes[..4], b"NCLR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 20);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 9);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 9.0);
        let expected = 20 + 8 * (4 + 12 + 3 * 20) + 20 + 54 + 8 * 2 * 20;
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn decode_inverts_encode_bitwise() {
        let s = sample();
        let bytes = encode_scene(&s);
        let back = decode_scene(&bytes, Path::new("mem")).unwrap();
        assert_eq!(encode_scene(&back), bytes);
        assert_eq!(back.point_overlap, s.point_overlap);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let s = sample();
        let mut bytes = encode_scene(&s);
        let p = Path::new("mem");
        assert!(decode_scene(&bytes[..bytes.len() - 1], p).is_err());
        bytes.push(0);
        assert!(decode_scene(&bytes, p).is_err());
        bytes.pop();
        bytes[4] = 2;
        assert!(matches!(decode_scene(&bytes, p), Err(Error::Version(_))));
        bytes[0] = b'X';
        assert!(decode_scene(&bytes, p).is_err());
    }

    #[test]
    fn dataset_round_trip_checks_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        let cfg = SceneConfig::default();
        let m = write_dataset(dir.path(), &[s.clone(), s.clone()], &cfg, 9).unwrap();
        assert_eq!(m.count, 2);
        let (m2, scenes) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(scenes.len(), 2);
        assert_eq!(encode_scene(&scenes[1]), encode_scene(&s));
        assert!(dir.path().join("sample_000001.nclr").exists());
    }
}
