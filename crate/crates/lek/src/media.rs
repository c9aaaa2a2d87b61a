//! Video and audio containers.
//!
//! Video is read from YUV4MPEG2 files or from directories of PNG images; audio
//! from WAV. Frames are exchanged as 8-bit RGB before conversion to
//! [`Frame`].

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use lek_core::{Error as CoreError, Frame, FrameSequence};

use crate::error::{IoContext, LekError, Result};

/// Frame rate assumed for PNG directories without an `fps` file.
pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq)]
pub enum VideoSource {
    Y4m(PathBuf),
    /// Lexicographically ordered `*.png` files.
    PngDir { dir: PathBuf, fps: f64 },
}

impl VideoSource {
    /// Picks the reader from the path: a directory is a PNG sequence (frame
    /// rate from an optional `fps` text file), anything else must be `.y4m`.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let fps_file = path.join("fps");
            let fps = if fps_file.exists() {
                let text = fs::read_to_string(&fps_file).at(&fps_file)?;
                text.trim().parse::<f64>().map_err(|_| LekError::format(&fps_file, "expected a number"))?
            } else {
                DEFAULT_FPS
            };
            return Ok(Self::PngDir { dir: path.to_path_buf(), fps });
        }
        if !path.exists() {
            return Err(LekError::io(path, std::io::ErrorKind::NotFound.into()));
        }
        match path.extension().and_then(|e| e.to_str()) {
            Some("y4m") => Ok(Self::Y4m(path.to_path_buf())),
            _ => Err(LekError::Media(format!("{}: unsupported container, expected .y4m or a PNG directory", path.display()))),
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            Self::Y4m(p) => p,
            Self::PngDir { dir, .. } => dir,
        }
    }
}

/// Decoded 8-bit RGB video.
#[derive(Clone, Debug)]
pub struct RawVideo {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub frames: Vec<RgbImage>,
}

pub fn decode_video(source: &VideoSource) -> Result<RawVideo> {
    match source {
        VideoSource::Y4m(path) => decode_y4m(path),
        VideoSource::PngDir { dir, fps } => decode_png_dir(dir, *fps),
    }
}

fn decode_png_dir(dir: &Path, fps: f64) -> Result<RawVideo> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let img = image::open(f).map_err(|e| LekError::Media(format!("{}: {e}", f.display())))?;
        frames.push(img.to_rgb8());
    }
    let (width, height) = frames.first().map_or((0, 0), |f| (f.width() as usize, f.height() as usize));
    if frames.iter().any(|f| f.width() as usize != width || f.height() as usize != height) {
        return Err(LekError::Media(format!("{}: frames differ in size", dir.display())));
    }
    Ok(RawVideo { width, height, fps, frames })
}

#[derive(Clone, Copy)]
enum Range {
    Full,
    Limited,
}

fn yuv_to_rgb(y: u8, u: u8, v: u8, range: Range) -> [u8; 3] {
    let (y, cb, cr) = match range {
        Range::Full => (y as f64, u as f64 - 128.0, v as f64 - 128.0),
        Range::Limited => ((y as f64 - 16.0) * 255.0 / 219.0, (u as f64 - 128.0) * 255.0 / 224.0, (v as f64 - 128.0) * 255.0 / 224.0),
    };
    let r = y + 1.402 * cr;
    let g = y - 0.344136 * cb - 0.714136 * cr;
    let b = y + 1.772 * cb;
    [r, g, b].map(|c| c.round().clamp(0.0, 255.0) as u8)
}

fn rgb_to_yuv(p: [u8; 3]) -> [u8; 3] {
    let [r, g, b] = p.map(f64::from);
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    [y, cb, cr].map(|c| c.round().clamp(0.0, 255.0) as u8)
}

fn decode_y4m(path: &Path) -> Result<RawVideo> {
    let file = File::open(path).at(path)?;
    if file.metadata().at(path)?.len() == 0 {
        return Err(CoreError::EmptyInput(format!("{} is empty", path.display())).into());
    }
    let media = |e: y4m::Error| LekError::Media(format!("{}: {e}", path.display()));
    let mut dec = y4m::decode(BufReader::new(file)).map_err(media)?;
    let (w, h) = (dec.get_width(), dec.get_height());
    let rate = dec.get_framerate();
    if rate.den == 0 || rate.num == 0 {
        return Err(LekError::Media(format!("{}: frame rate {}:{}", path.display(), rate.num, rate.den)));
    }
    let (sx, sy, mono) = match dec.get_colorspace() {
        y4m::Colorspace::C420 | y4m::Colorspace::C420jpeg | y4m::Colorspace::C420paldv | y4m::Colorspace::C420mpeg2 => (1, 1, false),
        y4m::Colorspace::C422 => (1, 0, false),
        y4m::Colorspace::C444 => (0, 0, false),
        y4m::Colorspace::Cmono => (0, 0, true),
        other => return Err(LekError::Media(format!("{}: unsupported colorspace {other:?}", path.display()))),
    };
    let params = String::from_utf8_lossy(dec.get_raw_params()).into_owned();
    let range = if params.contains("XCOLORRANGE=FULL") { Range::Full } else { Range::Limited };
    let cw = (w + sx) >> sx;
    let mut frames = Vec::new();
    loop {
        let f = match dec.read_frame() {
            Ok(f) => f,
            Err(y4m::Error::EOF) => break,
            Err(e) => return Err(media(e)),
        };
        let (yp, up, vp) = (f.get_y_plane(), f.get_u_plane(), f.get_v_plane());
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let (u, v) = if mono { (128, 128) } else { (up[(y >> sy) * cw + (x >> sx)], vp[(y >> sy) * cw + (x >> sx)]) };
            image::Rgb(yuv_to_rgb(yp[y * w + x], u, v, range))
        });
        frames.push(img);
    }
    Ok(RawVideo { width: w, height: h, fps: rate.num as f64 / rate.den as f64, frames })
}

fn to_frame(img: &RgbImage, size: usize, index: usize) -> Result<Frame> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let square = imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let img = if side as usize == size { square } else { imageops::resize(&square, size as u32, size as u32, FilterType::Triangle) };
    let n = size * size;
    let mut px = vec![0.0; 3 * n];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            px[c * n + i] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(Frame::new(size, px, index)?)
}

/// 8-bit RGB view of a frame, rounded to nearest.
pub fn frame_to_rgb(frame: &Frame) -> RgbImage {
    let s = frame.size();
    RgbImage::from_fn(s as u32, s as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| (frame.get(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Decodes `source`, center-crops each frame to a square and resizes it to
/// `target_size`.
pub fn extract_frames(source: &VideoSource, target_size: usize) -> Result<FrameSequence> {
    if !target_size.is_power_of_two() {
        return Err(LekError::Config(format!("target size {target_size} is not a power of two")));
    }
    let raw = decode_video(source)?;
    if raw.frames.is_empty() {
        return Err(CoreError::EmptyInput(format!("{} has no frames", source.path().display())).into());
    }
    let frames = raw.frames.iter().enumerate().map(|(i, f)| to_frame(f, target_size, i)).collect::<Result<Vec<_>>>()?;
    Ok(FrameSequence::new(frames, raw.fps)?)
}

fn fps_ratio(fps: f64) -> y4m::Ratio {
    if (fps - fps.round()).abs() < 1e-9 {
        y4m::Ratio::new(fps.round() as usize, 1)
    } else {
        y4m::Ratio::new((fps * 1000.0).round() as usize, 1000)
    }
}

/// Writes full-range 4:4:4 YUV4MPEG2.
pub fn write_y4m(path: &Path, frames: &FrameSequence) -> Result<()> {
    let first = frames.frames().first().ok_or_else(|| CoreError::EmptyInput("no frames to write".into()))?;
    let s = first.size();
    let file = File::create(path).at(path)?;
    let media = |e: y4m::Error| LekError::Media(format!("{}: {e}", path.display()));
    let range = y4m::VendorExtensionString::new(b"COLORRANGE=FULL".to_vec()).map_err(media)?;
    let mut enc = y4m::encode(s, s, fps_ratio(frames.fps))
        .with_colorspace(y4m::Colorspace::C444)
        .append_vendor_extension(range)
        .write_header(BufWriter::new(file))
        .map_err(media)?;
    let mut planes = [vec![0u8; s * s], vec![0u8; s * s], vec![0u8; s * s]];
    for f in frames.frames() {
        if f.size() != s {
            return Err(CoreError::Shape("frames of one video must share a size".into()).into());
        }
        for (i, p) in frame_to_rgb(f).pixels().enumerate() {
            let yuv = rgb_to_yuv(p.0);
            for c in 0..3 {
                planes[c][i] = yuv[c];
            }
        }
        enc.write_frame(&y4m::Frame::new([&planes[0], &planes[1], &planes[2]], None)).map_err(media)?;
    }
    Ok(())
}

/// One PNG per frame (`000000.png`, ...) plus an `fps` file.
pub fn write_png_dir(dir: &Path, frames: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (i, f) in frames.frames().iter().enumerate() {
        let p = dir.join(format!("{i:06}.png"));
        frame_to_rgb(f).save(&p).map_err(|e| LekError::Media(format!("{}: {e}", p.display())))?;
    }
    let fps = dir.join("fps");
    fs::write(&fps, format!("{}\n", frames.fps)).at(&fps)
}

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a WAV file and averages its channels.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
    if bytes.is_empty() {
        return Err(CoreError::EmptyInput(format!("{} is empty", path.display())).into());
    }
    let media = |e: hound::Error| LekError::Media(format!("{}: {e}", path.display()));
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(media)?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>().map_err(media)?,
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            reader.into_samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<_, _>>().map_err(media)?
        }
    };
    let ch = spec.channels.max(1) as usize;
    let samples = interleaved.chunks(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}

/// 32-bit float mono WAV.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate: wave.sample_rate, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
    let media = |e: hound::Error| LekError::Media(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(media)?;
    for s in &wave.samples {
        w.write_sample(*s as f32).map_err(media)?;
    }
    w.finalize().map_err(media)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_range_colour_round_trip_within_one_level() {
        for r in (0..=255).step_by(15) {
            for g in (0..=255).step_by(17) {
                for b in (0..=255).step_by(51) {
                    let [y, u, v] = rgb_to_yuv([r, g, b]);
                    let back = yuv_to_rgb(y, u, v, Range::Full);
                    for (a, b) in back.iter().zip([r, g, b]) {
                        assert!((*a as i32 - b as i32).abs() <= 1, "{:?} -> {back:?}", [r, g, b]);
                    }
                }
            }
        }
    }

    #[test]
    fn limited_range_extremes() {
        assert_eq!(yuv_to_rgb(16, 128, 128, Range::Limited), [0, 0, 0]);
        assert_eq!(yuv_to_rgb(235, 128, 128, Range::Limited), [255, 255, 255]);
    }
}
