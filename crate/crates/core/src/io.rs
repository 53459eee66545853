//! GVOL container and landmark CSV files.
//!
//! A GVOL file is the magic `GVOL1\n`, a little-endian `u32` header length,
//! a UTF-8 JSON header and the raw little-endian payload in grid order
//! (x-fastest, channels interleaved per voxel).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{voxel_count, Dims, DisplacementField, FeatureVolume, Spacing, Volume};

pub const MAGIC: &[u8; 6] = b"GVOL1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Intensity,
    Mask,
    Features,
    Displacement,
    VaeParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dims: Dims,
    pub channels: usize,
    pub dtype: DType,
    pub spacing_mm: Spacing,
    pub kind: Kind,
    /// Free-form extension block (used by parameter checkpoints).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

impl Header {
    pub fn element_count(&self) -> usize {
        voxel_count(self.dims) * self.channels
    }
}

/// Decoded GVOL file; the payload is widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gvol {
    pub header: Header,
    pub payload: Vec<f64>,
}

impl Gvol {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let n = self.header.element_count();
        if self.payload.len() != n {
            return Err(invalid(format!("payload has {} values, header wants {n}", self.payload.len())));
        }
        let json = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + n * self.header.dtype.width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        match self.header.dtype {
            DType::F32 => self.payload.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => self.payload.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            DType::U8 => {
                for &v in &self.payload {
                    if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                        return Err(invalid(format!("value {v} does not fit dtype u8")));
                    }
                    out.push(v as u8);
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fmt("missing GVOL1 magic"));
        }
        let mut len = [0u8; 4];
        len.copy_from_slice(&bytes[6..10]);
        let hlen = u32::from_le_bytes(len) as usize;
        let body = &bytes[10..];
        if body.len() < hlen {
            return Err(fmt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.dims.iter().any(|&d| d == 0) || header.channels == 0 {
            return Err(fmt("header dims/channels must be >= 1"));
        }
        let raw = &body[hlen..];
        let n = header.element_count();
        if raw.len() != n * header.dtype.width() {
            return Err(Error::Format(format!(
                "payload is {} bytes, expected {}",
                raw.len(),
                n * header.dtype.width()
            )));
        }
        let payload = match header.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
            DType::U8 => raw.iter().map(|&b| b as f64).collect(),
        };
        Ok(Gvol { header, payload })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    fn expect_kind(&self, kinds: &[Kind]) -> Result<()> {
        if kinds.contains(&self.header.kind) {
            Ok(())
        } else {
            Err(Error::Format(format!("expected kind {kinds:?}, found {:?}", self.header.kind)))
        }
    }
}

fn header(dims: Dims, channels: usize, dtype: DType, spacing: Spacing, kind: Kind) -> Header {
    Header { dims, channels, dtype, spacing_mm: spacing, kind, extra: None }
}

/// Encode an intensity (`f32`) or mask (`u8`) volume.
pub fn volume_to_gvol(v: &Volume, kind: Kind) -> Result<Gvol> {
    let dtype = match kind {
        Kind::Intensity => DType::F32,
        Kind::Mask => DType::U8,
        other => return Err(invalid(format!("kind {other:?} is not a scalar volume"))),
    };
    Ok(Gvol { header: header(v.dims(), 1, dtype, v.spacing(), kind), payload: v.data().to_vec() })
}

pub fn features_to_gvol(f: &FeatureVolume) -> Gvol {
    Gvol {
        header: header(f.dims(), f.channels(), DType::F32, f.spacing(), Kind::Features),
        payload: f.data().to_vec(),
    }
}

pub fn field_to_gvol(u: &DisplacementField) -> Gvol {
    Gvol {
        header: header(u.dims(), 3, DType::F32, u.spacing(), Kind::Displacement),
        payload: u.data().to_vec(),
    }
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume, kind: Kind) -> Result<()> {
    volume_to_gvol(v, kind)?.write(path)
}

pub fn write_features(path: impl AsRef<Path>, f: &FeatureVolume) -> Result<()> {
    features_to_gvol(f).write(path)
}

pub fn write_field(path: impl AsRef<Path>, u: &DisplacementField) -> Result<()> {
    field_to_gvol(u).write(path)
}

/// Read a scalar volume of kind intensity or mask.
pub fn read_volume(path: impl AsRef<Path>) -> Result<(Volume, Kind)> {
    let g = Gvol::read(path)?;
    g.expect_kind(&[Kind::Intensity, Kind::Mask])?;
    if g.header.channels != 1 {
        return Err(Error::Format("scalar volume must have 1 channel".into()));
    }
    let kind = g.header.kind;
    Ok((Volume::new(g.header.dims, g.header.spacing_mm, g.payload)?, kind))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureVolume> {
    let g = Gvol::read(path)?;
    g.expect_kind(&[Kind::Features, Kind::Intensity])?;
    FeatureVolume::new(g.header.dims, g.header.channels, g.header.spacing_mm, g.payload)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let g = Gvol::read(path)?;
    g.expect_kind(&[Kind::Displacement])?;
    if g.header.channels != 3 {
        return Err(Error::Format("displacement must have 3 channels".into()));
    }
    DisplacementField::new(g.header.dims, g.header.spacing_mm, g.payload)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Fixed,
    Moving,
}

/// Landmarks in voxel coordinates of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 3]>,
    pub frame: Frame,
}

#[derive(Serialize, Deserialize)]
struct Row {
    x: f64,
    y: f64,
    z: f64,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 3]>, frame: Frame) -> Self {
        LandmarkSet { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Fails on the first point outside `[0, dim - 1]`.
    pub fn check_bounds(&self, dims: Dims) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            let ok = (0..3).all(|a| p[a].is_finite() && p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64);
            if !ok {
                return Err(invalid(format!("landmark row {i} {p:?} outside volume {dims:?}")));
            }
        }
        Ok(())
    }

    pub fn from_csv_str(s: &str, frame: Frame) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(s.as_bytes());
        let hdr = rdr.headers()?.clone();
        if hdr.iter().collect::<Vec<_>>() != ["x", "y", "z"] {
            return Err(Error::Format(format!("landmark header must be x,y,z, found {hdr:?}")));
        }
        let points = rdr
            .deserialize::<Row>()
            .map(|r| r.map(|r| [r.x, r.y, r.z]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(LandmarkSet { points, frame })
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(Row { x: p[0], y: p[1], z: p[2] })?;
        }
        if self.points.is_empty() {
            w.write_record(["x", "y", "z"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Load and validate against the volume the points belong to.
    pub fn read(path: impl AsRef<Path>, frame: Frame, dims: Option<Dims>) -> Result<Self> {
        let set = Self::from_csv_str(&fs::read_to_string(path)?, frame)?;
        if let Some(d) = dims {
            set.check_bounds(d)?;
        }
        Ok(set)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_magic_length_header_payload() {
        let v = Volume::new([2, 1, 1], [1.0, 1.0, 2.5], vec![1.5, -2.0]).unwrap();
        let bytes = volume_to_gvol(&v, Kind::Intensity).unwrap().encode().unwrap();
        assert_eq!(&bytes[..6], b"GVOL1\n");
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[10..10 + hlen]).unwrap();
        assert_eq!(json["dims"], serde_json::json!([2, 1, 1]));
        assert_eq!(json["channels"], 1);
        assert_eq!(json["dtype"], "f32");
        assert_eq!(json["kind"], "intensity");
        assert_eq!(json["spacing_mm"], serde_json::json!([1.0, 1.0, 2.5]));
        assert_eq!(&bytes[10 + hlen..10 + hlen + 4], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 10 + hlen + 8);
    }

    #[test]
    fn mask_uses_u8_and_rejects_fractions() {
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![0.0, 1.0, 6.0]).unwrap();
        let g = volume_to_gvol(&v, Kind::Mask).unwrap();
        let bytes = g.encode().unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 1, 6]);
        let bad = Volume::new([1, 1, 1], [1.0; 3], vec![0.5]).unwrap();
        assert!(volume_to_gvol(&bad, Kind::Mask).unwrap().encode().is_err());
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(matches!(Gvol::decode(b"NOPE"), Err(Error::Format(_))));
        let v = Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 8]).unwrap();
        let mut bytes = volume_to_gvol(&v, Kind::Intensity).unwrap().encode().unwrap();
        bytes.pop();
        assert!(matches!(Gvol::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn landmarks_csv_roundtrip_and_bounds() {
        let set = LandmarkSet::new(vec![[1.0, 2.5, 3.0], [0.0, 0.0, 0.0]], Frame::Fixed);
        let s = set.to_csv_string().unwrap();
        assert!(s.starts_with("x,y,z\n"));
        let back = LandmarkSet::from_csv_str(&s, Frame::Fixed).unwrap();
        assert_eq!(back, set);
        assert!(back.check_bounds([4, 4, 4]).is_ok());
        assert!(back.check_bounds([4, 2, 4]).is_err());
        assert!(LandmarkSet::from_csv_str("a,b,c\n1,2,3\n", Frame::Moving).is_err());
    }

    proptest! {
        #[test]
        fn f32_payload_roundtrips_bit_exactly(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 12)) {
            let data: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            let f = FeatureVolume::new([2, 2, 1], 3, [1.0, 2.0, 3.0], data).unwrap();
            let bytes = features_to_gvol(&f).encode().unwrap();
            let back = Gvol::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode().unwrap(), bytes);
            prop_assert_eq!(back.payload, f.data().to_vec());
        }
    }
}
