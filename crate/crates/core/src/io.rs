//! File formats.
//!
//! * `FMAP` feature maps: magic, `u32` LE `H, W, C`, then `H·W·C` `f32` LE
//!   values in `(y, x, c)` order. Values are widened to `f64` on load.
//! * `ETWT` fusion parameters: magic, variant byte (0 identity, 1
//!   bottleneck), mode byte (0 softmax, 1 max), `u32` LE `C`, then `W_z`,
//!   `θ`, `φ`, `g` as row-major `f64` LE. The embeddings are present only for
//!   the bottleneck variant. Temperature is not stored and loads as 1.
//! * Observations CSV: `view_id,joint_id,x,y,confidence`.
//! * Pose CSV: `joint_id,x,y[,z],confidence`.
//!
//! Every writer goes through [`write_atomic`], so a failed write never leaves
//! a truncated file behind.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Embeddings, FusionParams, FusionVariant, WeightMode};
use crate::sampler::FeatureMap;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const ETWT_MAGIC: &[u8; 4] = b"ETWT";

/// Writes through a temporary file in the destination directory and renames
/// it into place once `write` succeeds.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error.to_string()))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        Error::Format(format!("{}: at `{at}`: {}", path.display(), e.inner()))
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format(format!("{} is truncated", self.what)));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!(
                "{} must start with {:?}",
                self.what,
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if !self.bytes.is_empty() {
            return Err(Error::Format(format!("{} has {} trailing bytes", self.what, self.bytes.len())));
        }
        Ok(())
    }
}

pub fn encode_feature_map(map: &FeatureMap) -> Result<Vec<u8>> {
    let (h, w, c) = map.dims();
    let mut out = Vec::with_capacity(16 + 4 * map.data().len());
    out.extend_from_slice(FMAP_MAGIC);
    for d in [h, w, c] {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in map.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Format(format!("value {v} is not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let mut cur = Cursor {
        bytes,
        what: "feature map",
    };
    cur.magic(FMAP_MAGIC)?;
    let (h, w, c) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    let n = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .filter(|n| n.checked_mul(4).is_some_and(|b| b == cur.bytes.len()))
        .ok_or_else(|| Error::Format(format!("feature map payload does not match {h}×{w}×{c}")))?;
    let data = cur
        .take(4 * n)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    cur.finish()?;
    FeatureMap::new(h, w, c, data)
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_feature_map(&bytes)
}

pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    let bytes = encode_feature_map(map)?;
    write_atomic(path, |w| Ok(w.write_all(&bytes)?))
}

pub fn encode_params(params: &FusionParams) -> Result<Vec<u8>> {
    params.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(ETWT_MAGIC);
    out.push(match params.variant {
        FusionVariant::IdentityGaussian => 0,
        FusionVariant::BottleneckEmbeddedGaussian => 1,
    });
    out.push(match params.mode {
        WeightMode::Softmax => 0,
        WeightMode::Max => 1,
    });
    let c = u32::try_from(params.channels()).map_err(|_| Error::Format("channel count does not fit in u32".into()))?;
    out.extend_from_slice(&c.to_le_bytes());
    let mut put = |m: &DMatrix<f64>| {
        for r in 0..m.nrows() {
            for col in 0..m.ncols() {
                out.extend_from_slice(&m[(r, col)].to_le_bytes());
            }
        }
    };
    put(&params.w_z);
    if let Some(e) = &params.embeddings {
        put(&e.theta);
        put(&e.phi);
        put(&e.g);
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<FusionParams> {
    let mut cur = Cursor {
        bytes,
        what: "parameter file",
    };
    cur.magic(ETWT_MAGIC)?;
    let variant = match cur.u8()? {
        0 => FusionVariant::IdentityGaussian,
        1 => FusionVariant::BottleneckEmbeddedGaussian,
        b => return Err(Error::Format(format!("unknown variant byte {b}"))),
    };
    let mode = match cur.u8()? {
        0 => WeightMode::Softmax,
        1 => WeightMode::Max,
        b => return Err(Error::Format(format!("unknown mode byte {b}"))),
    };
    let c = cur.u32()? as usize;
    if c == 0 {
        return Err(Error::Format("channel count must be positive".into()));
    }
    let mut matrix = |rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8));
        let raw = cur.take(n.ok_or_else(|| Error::Format("matrix size overflows".into()))?)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    };
    let params = match variant {
        FusionVariant::IdentityGaussian => FusionParams::identity(mode, matrix(c, c)?)?,
        FusionVariant::BottleneckEmbeddedGaussian => {
            if !c.is_multiple_of(2) {
                return Err(Error::OddChannels(c));
            }
            let w_z = matrix(c / 2, c)?;
            let theta = matrix(c, c / 2)?;
            let phi = matrix(c, c / 2)?;
            let g = matrix(c, c / 2)?;
            FusionParams::bottleneck(mode, w_z, Embeddings { theta, phi, g })?
        }
    };
    cur.finish()?;
    Ok(params)
}

pub fn read_params(path: &Path) -> Result<FusionParams> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_params(&bytes)
}

pub fn write_params(path: &Path, params: &FusionParams) -> Result<()> {
    let bytes = encode_params(params)?;
    write_atomic(path, |w| Ok(w.write_all(&bytes)?))
}

/// One row of an observations file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub view_id: usize,
    pub joint_id: u32,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

fn csv_error(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Format(format!("line {}: {e}", p.line())),
        None => Error::Format(e.to_string()),
    }
}

pub fn parse_observations(reader: impl Read) -> Result<Vec<ObservationRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let rows: Vec<ObservationRow> = rdr.deserialize().collect::<Result<_, _>>().map_err(csv_error)?;
    for (i, r) in rows.iter().enumerate() {
        if !(r.x.is_finite() && r.y.is_finite() && r.confidence.is_finite()) {
            return Err(Error::Format(format!("line {}: non-finite value", i + 2)));
        }
    }
    Ok(rows)
}

pub fn read_observations(path: &Path) -> Result<Vec<ObservationRow>> {
    parse_observations(File::open(path)?)
}

pub fn write_observations(path: &Path, rows: &[ObservationRow]) -> Result<()> {
    write_atomic(path, |w| {
        let mut wr = csv::Writer::from_writer(w);
        for r in rows {
            wr.serialize(r).map_err(csv_error)?;
        }
        wr.flush()?;
        Ok(())
    })
}

/// One joint of a pose file. `z` is present for 3D poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRow {
    pub joint_id: u32,
    pub x: f64,
    pub y: f64,
    pub z: Option<f64>,
    pub confidence: f64,
    /// 1-based line in the source file, 0 if built in memory.
    pub line: u64,
}

/// Columns are located by header name, so `z` may be omitted.
pub fn parse_pose(reader: impl Read) -> Result<Vec<PoseRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::Format(format!("pose file lacks a `{name}` column")));
    let (ij, ix, iy, ic) = (need("joint_id")?, need("x")?, need("y")?, need("confidence")?);
    let iz = col("z");
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            let v: f64 = field(i)
                .parse()
                .map_err(|_| Error::Format(format!("line {line}: `{}` is not a number", field(i))))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Format(format!("line {line}: non-finite value")))
            }
        };
        rows.push(PoseRow {
            joint_id: field(ij)
                .parse()
                .map_err(|_| Error::Format(format!("line {line}: bad joint_id `{}`", field(ij))))?,
            x: num(ix)?,
            y: num(iy)?,
            z: iz.map(num).transpose()?,
            confidence: num(ic)?,
            line,
        });
    }
    Ok(rows)
}

pub fn read_pose(path: &Path) -> Result<Vec<PoseRow>> {
    parse_pose(File::open(path)?)
}

pub fn write_pose(path: &Path, rows: &[PoseRow]) -> Result<()> {
    let three_d = rows.first().is_some_and(|r| r.z.is_some());
    if rows.iter().any(|r| r.z.is_some() != three_d) {
        return Err(Error::InvalidArgument("pose mixes 2D and 3D joints".into()));
    }
    write_atomic(path, |w| {
        let mut wr = csv::Writer::from_writer(w);
        let header: &[&str] = if three_d {
            &["joint_id", "x", "y", "z", "confidence"]
        } else {
            &["joint_id", "x", "y", "confidence"]
        };
        wr.write_record(header).map_err(csv_error)?;
        for r in rows {
            // Debug keeps round-trip precision and switches to exponent form
            // for very large or small magnitudes.
            let mut rec = vec![r.joint_id.to_string(), format!("{:?}", r.x), format!("{:?}", r.y)];
            if let Some(z) = r.z {
                rec.push(format!("{z:?}"));
            }
            rec.push(format!("{:?}", r.confidence));
            wr.write_record(&rec).map_err(csv_error)?;
        }
        wr.flush()?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmap_layout() {
        let map = FeatureMap::from_fn(2, 3, 2, |y, x, c| (100 * y + 10 * x + c) as f64).unwrap();
        let bytes = encode_feature_map(&map).unwrap();
        assert_eq!(&bytes[..4], b"FMAP");
        assert_eq!(&bytes[4..16], &[2, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]);
        // (y=0, x=1, c=1) is the fourth value.
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 11.0);
        assert_eq!(decode_feature_map(&bytes).unwrap(), map);
    }

    #[test]
    fn fmap_rejects_bad_input() {
        let map = FeatureMap::zeros(2, 2, 1).unwrap();
        let bytes = encode_feature_map(&map).unwrap();
        assert!(decode_feature_map(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_feature_map(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_feature_map(&magic), Err(Error::Format(_))));
        let mut nan = bytes;
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_feature_map(&nan), Err(Error::InvalidFeatureMap(_))));
    }

    #[test]
    fn params_round_trip() {
        for variant in [FusionVariant::IdentityGaussian, FusionVariant::BottleneckEmbeddedGaussian] {
            for mode in [WeightMode::Softmax, WeightMode::Max] {
                let p = FusionParams::random(variant, mode, 6, 9).unwrap();
                let bytes = encode_params(&p).unwrap();
                assert_eq!(decode_params(&bytes).unwrap(), p);
            }
        }
    }

    #[test]
    fn params_layout_is_row_major() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = FusionParams::identity(WeightMode::Max, w).unwrap();
        let bytes = encode_params(&p).unwrap();
        assert_eq!(&bytes[..6], b"ETWT\x00\x01");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        let vals: Vec<f64> = bytes[10..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(vals, [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn params_reject_odd_bottleneck() {
        let mut bytes = b"ETWT\x01\x00".to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        assert_eq!(decode_params(&bytes), Err(Error::OddChannels(3)));
    }

    #[test]
    fn pose_with_and_without_z() {
        let two = parse_pose("joint_id,x,y,confidence\n0,1.5,2,0.9\n1,3,4,1\n".as_bytes()).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[0].z, None);
        assert_eq!(two[1].line, 3);
        let three = parse_pose("joint_id, x, y, z, confidence\n4, 1, 2, 3, 0.5\n".as_bytes()).unwrap();
        assert_eq!(three[0].z, Some(3.0));
        assert_eq!(three[0].joint_id, 4);
        let err = parse_pose("joint_id,x,y,confidence\n0,a,2,1\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_pose("joint_id,x,confidence\n".as_bytes()).is_err());
    }

    #[test]
    fn observations_parse() {
        let rows = parse_observations("view_id,joint_id,x,y,confidence\n3,1,10.5,20,0.7\n".as_bytes()).unwrap();
        assert_eq!(
            rows,
            [ObservationRow {
                view_id: 3,
                joint_id: 1,
                x: 10.5,
                y: 20.0,
                confidence: 0.7
            }]
        );
        assert!(parse_observations("view_id,joint_id,x,y,confidence\n-1,1,1,1,1\n".as_bytes()).is_err());
    }

    #[test]
    fn atomic_write_leaves_nothing_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        let r = write_atomic(&path, |w| {
            w.write_all(b"partial")?;
            Err(Error::Format("boom".into()))
        });
        assert!(r.is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
        write_atomic(&path, |w| Ok(w.write_all(b"ok")?)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"ok");
    }
}
