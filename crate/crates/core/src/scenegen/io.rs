//! Little-endian binary formats for scenes and predictions.
//!
//! Scene file:
//!
//! ```text
//! magic       4 bytes  "ISBS"
//! version     u32      SCENE_VERSION
//! n           u64      point count
//! c           u32      class count
//! flags       u32      bit 0: superpoints present
//! positions   3n x f64
//! colors      3n x f64
//! semantic    n x i32
//! instance    n x i32  (-1 = no instance)
//! superpoints n x i32  (only with flag bit 0)
//! ```
//!
//! Prediction file:
//!
//! ```text
//! magic       4 bytes  "ISBP"
//! version     u32      PREDICTION_VERSION
//! n           u64      point count of the scene
//! count       u64      number of predictions
//! then per prediction:
//!   class     u32
//!   score     f64
//!   box       6 x f64  (x1, y1, z1, x2, y2, z2)
//!   len       u64
//!   indices   len x u32, strictly increasing
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Point3, Scene};
use crate::pipeline::Prediction;

pub const SCENE_MAGIC: &[u8; 4] = b"ISBS";
pub const SCENE_VERSION: u32 = 1;
pub const PREDICTION_MAGIC: &[u8; 4] = b"ISBP";
pub const PREDICTION_VERSION: u32 = 1;

const FLAG_SUPERPOINTS: u32 = 1;

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.bytes::<4>(what).map(u32::from_le_bytes)
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        self.bytes::<4>(what).map(i32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.bytes::<8>(what).map(u64::from_le_bytes)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        self.bytes::<8>(what).map(f64::from_le_bytes)
    }

    fn header(&mut self, magic: &[u8; 4], version: u32, kind: &str) -> Result<()> {
        let m = self.bytes::<4>("magic")?;
        if &m != magic {
            return Err(Error::Format(format!("not a {kind} file (magic {m:?})")));
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(Error::Format(format!("unsupported {kind} version {v}, expected {version}")));
        }
        Ok(())
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after end of data".into())),
        }
    }
}

fn points<R: Read>(r: &mut Reader<R>, n: usize, what: &str) -> Result<Vec<Point3>> {
    (0..n)
        .map(|_| Ok([r.f64(what)?, r.f64(what)?, r.f64(what)?]))
        .collect()
}

fn non_negative(v: i32, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("negative {what} label {v}")))
}

pub fn write_scene_to<W: Write>(scene: &Scene, mut w: W) -> Result<()> {
    scene.validate()?;
    w.write_all(SCENE_MAGIC)?;
    w.write_all(&SCENE_VERSION.to_le_bytes())?;
    w.write_all(&(scene.len() as u64).to_le_bytes())?;
    w.write_all(&(scene.num_classes as u32).to_le_bytes())?;
    let flags = if scene.superpoints.is_some() { FLAG_SUPERPOINTS } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    for p in scene.positions.iter().chain(&scene.colors) {
        for v in p {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for &s in &scene.semantic {
        w.write_all(&(s as i32).to_le_bytes())?;
    }
    for &i in &scene.instance {
        w.write_all(&i.to_le_bytes())?;
    }
    if let Some(sp) = &scene.superpoints {
        for &s in sp {
            w.write_all(&(s as i32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a whole scene; any truncation or inconsistency is an error and
/// nothing partial is returned.
pub fn read_scene_from<R: Read>(inner: R) -> Result<Scene> {
    let mut r = Reader { inner };
    r.header(SCENE_MAGIC, SCENE_VERSION, "scene")?;
    let n = r.u64("point count")? as usize;
    let c = r.u32("class count")? as usize;
    let flags = r.u32("flags")?;
    if flags & !FLAG_SUPERPOINTS != 0 {
        return Err(Error::Format(format!("unknown scene flags {flags:#x}")));
    }
    let positions = points(&mut r, n, "positions")?;
    let colors = points(&mut r, n, "colors")?;
    let semantic = (0..n)
        .map(|_| non_negative(r.i32("semantic labels")?, "semantic"))
        .collect::<Result<Vec<_>>>()?;
    let instance = (0..n).map(|_| r.i32("instance labels")).collect::<Result<Vec<_>>>()?;
    let superpoints = if flags & FLAG_SUPERPOINTS != 0 {
        Some(
            (0..n)
                .map(|_| non_negative(r.i32("superpoints")?, "superpoint"))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    r.expect_end()?;
    Scene::new(positions, colors, semantic, instance, superpoints, c)
}

pub fn write_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_scene_to(scene, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene> {
    read_scene_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_predictions_to<W: Write>(preds: &[Prediction], num_points: usize, mut w: W) -> Result<()> {
    w.write_all(PREDICTION_MAGIC)?;
    w.write_all(&PREDICTION_VERSION.to_le_bytes())?;
    w.write_all(&(num_points as u64).to_le_bytes())?;
    w.write_all(&(preds.len() as u64).to_le_bytes())?;
    for p in preds {
        if p.mask.len() != num_points {
            return Err(Error::LengthMismatch {
                expected: num_points,
                actual: p.mask.len(),
            });
        }
        w.write_all(&(p.class as u32).to_le_bytes())?;
        w.write_all(&p.score.to_le_bytes())?;
        for v in p.bbox {
            w.write_all(&v.to_le_bytes())?;
        }
        let idx = p.indices();
        w.write_all(&(idx.len() as u64).to_le_bytes())?;
        for i in idx {
            w.write_all(&(i as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads predictions; masks come back as dense `num_points` vectors.
pub fn read_predictions_from<R: Read>(inner: R) -> Result<(usize, Vec<Prediction>)> {
    let mut r = Reader { inner };
    r.header(PREDICTION_MAGIC, PREDICTION_VERSION, "prediction")?;
    let n = r.u64("point count")? as usize;
    let count = r.u64("prediction count")? as usize;
    let mut preds = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let class = r.u32("class")? as usize;
        let score = r.f64("score")?;
        let mut bbox = [0.0; 6];
        for v in &mut bbox {
            *v = r.f64("box")?;
        }
        let len = r.u64("mask length")? as usize;
        let mut mask = vec![false; n];
        let mut prev: Option<usize> = None;
        for _ in 0..len {
            let i = r.u32("mask indices")? as usize;
            if prev.is_some_and(|p| i <= p) {
                return Err(Error::Format(format!("mask indices not strictly increasing at {i}")));
            }
            if i >= n {
                return Err(Error::Format(format!("mask index {i} outside 0..{n}")));
            }
            mask[i] = true;
            prev = Some(i);
        }
        preds.push(Prediction { class, score, bbox, mask });
    }
    r.expect_end()?;
    Ok((n, preds))
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction], num_points: usize) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_predictions_to(preds, num_points, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<(usize, Vec<Prediction>)> {
    read_predictions_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> Scene {
        Scene::new(
            vec![[0.0, 1.0, 2.0], [0.5, -1.0, 1e-9], [3.0, 3.0, 3.0]],
            vec![[0.1, 0.2, 0.3]; 3],
            vec![0, 2, 2],
            vec![-1, 0, 0],
            Some(vec![0, 1, 1]),
            3,
        )
        .unwrap()
    }

    #[test]
    fn scene_roundtrip_and_errors() {
        let s = scene();
        let mut bytes = Vec::new();
        write_scene_to(&s, &mut bytes).unwrap();
        assert_eq!(read_scene_from(bytes.as_slice()).unwrap(), s);

        for cut in [0, 3, 10, bytes.len() - 1] {
            let err = read_scene_from(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated"), "{err}");
        }
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        assert!(read_scene_from(bumped.as_slice()).unwrap_err().to_string().contains("version 2"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_scene_from(bad.as_slice()).is_err());
        bytes.push(0);
        assert!(read_scene_from(bytes.as_slice()).is_err());
    }

    #[test]
    fn prediction_roundtrip() {
        let preds = vec![Prediction {
            class: 2,
            score: 0.75,
            bbox: [0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            mask: vec![false, true, true],
        }];
        let mut bytes = Vec::new();
        write_predictions_to(&preds, 3, &mut bytes).unwrap();
        assert_eq!(read_predictions_from(bytes.as_slice()).unwrap(), (3, preds));

        let mut empty = Vec::new();
        write_predictions_to(&[], 5, &mut empty).unwrap();
        assert_eq!(read_predictions_from(empty.as_slice()).unwrap(), (5, vec![]));
    }

    #[test]
    fn unsorted_indices_rejected() {
        let mut bytes = Vec::new();
        bytes.extend(PREDICTION_MAGIC);
        bytes.extend(PREDICTION_VERSION.to_le_bytes());
        bytes.extend(4u64.to_le_bytes());
        bytes.extend(1u64.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(0.5f64.to_le_bytes());
        for _ in 0..6 {
            bytes.extend(0.0f64.to_le_bytes());
        }
        bytes.extend(2u64.to_le_bytes());
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        let err = read_predictions_from(bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("increasing"));
    }
}
