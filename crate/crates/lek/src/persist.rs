//! On-disk formats.
//!
//! * Latent trajectories: `LEKTRAJ1`, a `u32` little-endian header length, a
//!   JSON header `{"frames", "layers", "dim", "dtype"}` and a row-major
//!   little-endian payload.
//! * Bundles (checkpoints, frames, audio features): `LEKBNDL1`, the same
//!   framing, header `{"kind", "meta", "tensors": [{"name", "shape"}], "dtype"}`.
//! * Landmark sequences: JSON `{"n": int, "frames": [[[x, y], ...], ...]}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use lek_core::audio2landmark::AudioFeatureWindow;
use lek_core::generator::LatentCode;
use lek_core::optimizer::LatentTrajectory;
use lek_core::stitching::Mask;
use lek_core::{Affine2, Error as CoreError, Frame, FrameSequence, LandmarkSet, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IoContext, LekError, Result};

pub const TRAJ_MAGIC: &[u8; 8] = b"LEKTRAJ1";
pub const BUNDLE_MAGIC: &[u8; 8] = b"LEKBNDL1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn encode(self, data: &[f64], out: &mut Vec<u8>) {
        for v in data {
            match self {
                Self::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                Self::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Self::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk")) as f64).collect(),
            Self::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk"))).collect(),
        }
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).at(&tmp)?;
    f.write_all(bytes).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn frame_container<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[u8]) -> Vec<u8> {
    let h = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + h.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(payload);
    out
}

fn split_container<'a, H: Deserialize<'a>>(path: &Path, magic: &[u8; 8], bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(LekError::format(path, format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < n {
        return Err(LekError::format(path, "truncated header"));
    }
    let header = serde_json::from_slice(&body[..n]).map_err(|e| LekError::format(path, format!("header: {e}")))?;
    Ok((header, &body[n..]))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajHeader {
    frames: usize,
    layers: usize,
    dim: usize,
    dtype: Dtype,
}

pub fn save_trajectory(path: &Path, codes: &[LatentCode]) -> Result<()> {
    save_trajectory_as(path, codes, Dtype::F64)
}

/// `f32` files round-trip only values representable in single precision.
pub fn save_trajectory_as(path: &Path, codes: &[LatentCode], dtype: Dtype) -> Result<()> {
    let first = codes.first().ok_or_else(|| CoreError::EmptyInput("no latent codes to save".into()))?;
    let (layers, dim) = first.shape();
    let mut payload = Vec::with_capacity(codes.len() * layers * dim * dtype.width());
    for w in codes {
        if w.shape() != (layers, dim) {
            return Err(CoreError::Shape(format!("latent {:?} in a {layers}x{dim} trajectory", w.shape())).into());
        }
        dtype.encode(w.data(), &mut payload);
    }
    let header = TrajHeader { frames: codes.len(), layers, dim, dtype };
    write_atomic(path, &frame_container(TRAJ_MAGIC, &header, &payload))
}

pub fn load_trajectory(path: &Path) -> Result<Vec<LatentCode>> {
    let bytes = fs::read(path).at(path)?;
    let (h, payload): (TrajHeader, _) = split_container(path, TRAJ_MAGIC, &bytes)?;
    let per = h.layers * h.dim;
    if payload.len() != h.frames * per * h.dtype.width() {
        return Err(LekError::format(path, format!("payload of {} bytes for {} frames of {}x{} {:?}", payload.len(), h.frames, h.layers, h.dim, h.dtype)));
    }
    if h.frames == 0 || per == 0 {
        return Err(LekError::format(path, "empty trajectory"));
    }
    let values = h.dtype.decode(payload);
    values
        .chunks_exact(per)
        .map(|c| Ok(LatentCode::new(Tensor::new(&[h.layers, h.dim], c.to_vec())?)?))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| LekError::format(path, e.to_string()))
}

/// Named tensors with a kind tag and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    dtype: Dtype,
}

impl Bundle {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn from_store(kind: impl Into<String>, meta: serde_json::Value, store: &ParamStore) -> Self {
        let tensors = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self { kind: kind.into(), meta, tensors }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in &self.tensors {
            s.add(n.clone(), t.clone());
        }
        s
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| LekError::format(path, format!("{} metadata: {e}", self.kind)))
    }
}

pub fn save_bundle(path: &Path, b: &Bundle) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(b.tensors.len());
    for (name, t) in &b.tensors {
        Dtype::F64.encode(t.data(), &mut payload);
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec() });
    }
    let header = BundleHeader { kind: b.kind.clone(), meta: b.meta.clone(), tensors: entries, dtype: Dtype::F64 };
    write_atomic(path, &frame_container(BUNDLE_MAGIC, &header, &payload))
}

pub fn load_bundle(path: &Path) -> Result<Bundle> {
    let bytes = fs::read(path).at(path)?;
    let (h, payload): (BundleHeader, _) = split_container(path, BUNDLE_MAGIC, &bytes)?;
    let w = h.dtype.width();
    let total: usize = h.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != total * w {
        return Err(LekError::format(path, format!("payload of {} bytes, header describes {}", payload.len(), total * w)));
    }
    let mut off = 0;
    let mut tensors = Vec::with_capacity(h.tensors.len());
    for e in h.tensors {
        let n: usize = e.shape.iter().product();
        let data = h.dtype.decode(&payload[off..off + n * w]);
        off += n * w;
        let t = Tensor::new(&e.shape, data).map_err(|err| LekError::format(path, format!("tensor {}: {err}", e.name)))?;
        tensors.push((e.name, t));
    }
    Ok(Bundle { kind: h.kind, meta: h.meta, tensors })
}

/// Loads a bundle and checks its kind tag.
pub fn load_bundle_kind(path: &Path, kind: &str) -> Result<Bundle> {
    let b = load_bundle(path)?;
    if b.kind != kind {
        return Err(LekError::format(path, format!("expected a `{kind}` bundle, found `{}`", b.kind)));
    }
    Ok(b)
}

#[derive(Serialize, Deserialize)]
struct FramesMeta {
    fps: f64,
    indices: Vec<usize>,
    transforms: Vec<Affine2>,
}

/// Frames bit-exactly, with indices and crop transforms.
pub fn save_frames(path: &Path, seq: &FrameSequence) -> Result<()> {
    let meta = FramesMeta {
        fps: seq.fps,
        indices: seq.frames().iter().map(|f| f.index).collect(),
        transforms: seq.frames().iter().map(|f| f.crop_transform).collect(),
    };
    let mut b = Bundle::new("frames", serde_json::to_value(meta).expect("meta"));
    b.tensors = seq.frames().iter().enumerate().map(|(i, f)| (format!("frame.{i}"), f.to_tensor())).collect();
    save_bundle(path, &b)
}

pub fn load_frames(path: &Path) -> Result<FrameSequence> {
    let b = load_bundle_kind(path, "frames")?;
    let m: FramesMeta = b.meta_as(path)?;
    if m.indices.len() != b.tensors.len() || m.transforms.len() != b.tensors.len() {
        return Err(LekError::format(path, "frame metadata and tensors disagree"));
    }
    let frames = b
        .tensors
        .iter()
        .zip(m.indices.iter().zip(&m.transforms))
        .map(|((_, t), (i, tr))| Ok(Frame::from_tensor(t, *i)?.with_transform(*tr)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| LekError::format(path, e.to_string()))?;
    Ok(FrameSequence::new(frames, m.fps)?)
}

#[derive(Serialize, Deserialize)]
struct FeaturesMeta {
    indices: Vec<usize>,
}

pub fn save_features(path: &Path, windows: &[AudioFeatureWindow]) -> Result<()> {
    let meta = FeaturesMeta { indices: windows.iter().map(|w| w.frame_index).collect() };
    let mut b = Bundle::new("audio-features", serde_json::to_value(meta).expect("meta"));
    b.tensors = windows.iter().enumerate().map(|(i, w)| (format!("window.{i}"), w.features().clone())).collect();
    save_bundle(path, &b)
}

pub fn load_features(path: &Path) -> Result<Vec<AudioFeatureWindow>> {
    let b = load_bundle_kind(path, "audio-features")?;
    let m: FeaturesMeta = b.meta_as(path)?;
    if m.indices.len() != b.tensors.len() {
        return Err(LekError::format(path, "window metadata and tensors disagree"));
    }
    b.tensors
        .into_iter()
        .zip(m.indices)
        .map(|((_, t), i)| AudioFeatureWindow::new(t, i).map_err(|e| LekError::format(path, e.to_string())))
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandmarkFile {
    n: usize,
    frames: Vec<Vec<[f64; 2]>>,
}

pub fn landmarks_json(seq: &[LandmarkSet]) -> Result<String> {
    let n = seq.first().map_or(0, LandmarkSet::len);
    if seq.iter().any(|l| l.len() != n) {
        return Err(CoreError::Shape("landmark sets of one sequence must share n".into()).into());
    }
    let file = LandmarkFile { n, frames: seq.iter().map(|l| l.points().to_vec()).collect() };
    Ok(serde_json::to_string(&file).expect("landmarks serialize"))
}

pub fn save_landmarks(path: &Path, seq: &[LandmarkSet]) -> Result<()> {
    write_atomic(path, landmarks_json(seq)?.as_bytes())
}

pub fn load_landmarks(path: &Path) -> Result<Vec<LandmarkSet>> {
    let text = fs::read_to_string(path).at(path)?;
    let file: LandmarkFile = serde_json::from_str(&text).map_err(|e| LekError::format(path, e.to_string()))?;
    file.frames
        .into_iter()
        .enumerate()
        .map(|(i, pts)| {
            if pts.len() != file.n {
                return Err(LekError::format(path, format!("frame {i} has {} points, header says {}", pts.len(), file.n)));
            }
            LandmarkSet::new(pts).map_err(|e| LekError::format(path, format!("frame {i}: {e}")))
        })
        .collect()
}

/// 8-bit grayscale PNG, 255 inside the mask.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let s = mask.size() as u32;
    let img = image::GrayImage::from_fn(s, s, |x, y| image::Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }]));
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png).map_err(|e| LekError::Media(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| LekError::Media(format!("{}: {e}", path.display())))?.to_luma8();
    if img.width() != img.height() {
        return Err(LekError::format(path, "mask must be square"));
    }
    let data = img.pixels().map(|p| p.0[0] >= 128).collect();
    Ok(Mask::new(img.width() as usize, data)?)
}

/// CSV with a header row.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| LekError::format(path, e.to_string());
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r).map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| LekError::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Per-iteration loss log of an optimized clip.
pub fn write_loss_log(path: &Path, tr: &LatentTrajectory) -> Result<()> {
    let rows = tr.loss_log.iter().enumerate().flat_map(|(i, log)| {
        log.iter().enumerate().map(move |(k, t)| {
            [i.to_string(), k.to_string(), t.total.to_string(), t.lpips.to_string(), t.fan.to_string(), t.smooth.to_string()]
        })
    });
    write_csv(path, &["frame", "iteration", "total", "lpips", "fan", "smooth"], rows)
}

/// Single-column training curve.
pub fn write_curve(path: &Path, name: &str, values: &[f64]) -> Result<()> {
    write_csv(path, &["step", name], values.iter().enumerate().map(|(i, v)| [i.to_string(), v.to_string()]))
}
