//! 8-bit RGB PNG decoding/encoding and corpus directory scanning.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Element, Tensor};

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` samples, row-major, RGB interleaved.
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{} samples for {width}x{height} RGB", data.len()),
            ));
        }
        Ok(ImageBuffer { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// (1,3,H,W) tensor with samples mapped to `s / 255`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let inv = 1.0 / 255.0;
        Tensor::from_fn([1, 3, self.height, self.width], |_, c, y, x| {
            T::from_f64(self.data[(y * self.width + x) * 3 + c] as f64 * inv)
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor) for batch item 0: scales by
    /// 255, rounds half away from zero and clamps to `[0, 255]`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.c != 3 || s.n < 1 {
            return Err(Error::shape("image", format!("expected (N,3,H,W), got {s}")));
        }
        let mut data = Vec::with_capacity(s.plane() * 3);
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    data.push(quantize(t.at(0, c, y, x).as_f64()));
                }
            }
        }
        Ok(ImageBuffer {
            width: s.w,
            height: s.h,
            data,
        })
    }
}

fn quantize(v: f64) -> u8 {
    let q = (v * 255.0).round();
    if q.is_nan() {
        0
    } else {
        q.clamp(0.0, 255.0) as u8
    }
}

fn image_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Decode an 8-bit PNG. Grayscale is replicated to RGB, palettes are
/// expanded, and alpha is dropped.
pub fn load_png(path: &Path) -> Result<ImageBuffer> {
    let file = File::open(path).map_err(|e| image_err(path, e.to_string()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e.to_string()))?;
    let depth = reader.info().bit_depth;
    if depth == png::BitDepth::Sixteen {
        return Err(image_err(path, "unsupported bit depth 16 (only 8-bit PNGs are accepted)"));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(image_err(path, format!("unsupported bit depth {:?}", frame.bit_depth)));
    }
    let src = &buf[..frame.buffer_size()];
    let channels = match frame.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    let stride = frame.line_size;
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &src[y * stride..y * stride + w * channels];
        for px in row.chunks_exact(channels) {
            if channels < 3 {
                data.extend_from_slice(&[px[0]; 3]);
            } else {
                data.extend_from_slice(&px[..3]);
            }
        }
    }
    ImageBuffer::new(w, h, data)
}

pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| image_err(path, e.to_string()))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| image_err(path, e.to_string()))?;
    writer
        .write_image_data(&img.data)
        .map_err(|e| image_err(path, e.to_string()))?;
    writer.finish().map_err(|e| image_err(path, e.to_string()))
}

#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub image: ImageBuffer,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub images: Vec<ImageRecord>,
    /// Files that were not used, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Load every `.png` in `dir` (non-recursive) in lexicographic path order.
/// Undecodable files and images smaller than `min_size` on either side are
/// reported in `skipped`.
pub fn corpus_scan(dir: &Path, min_size: usize) -> Result<Corpus> {
    let entries = std::fs::read_dir(dir).map_err(|e| image_err(dir, e.to_string()))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| image_err(dir, e.to_string()))?.path();
        if path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    let decoded = par::map_indices(paths.len(), |i| {
        let path = &paths[i];
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            return Err("not a PNG file".to_string());
        }
        let image = load_png(path).map_err(|e| e.to_string())?;
        if image.width < min_size || image.height < min_size {
            return Err(format!(
                "{}x{} is smaller than the {min_size}px minimum",
                image.width, image.height
            ));
        }
        Ok(image)
    });
    let mut corpus = Corpus::default();
    for (path, result) in paths.into_iter().zip(decoded) {
        match result {
            Ok(image) => corpus.images.push(ImageRecord { path, image }),
            Err(reason) => {
                log::warn!("skipping {}: {reason}", path.display());
                corpus.skipped.push((path, reason));
            }
        }
    }
    Ok(corpus)
}
