//! File formats: binary PGM datasets with a JSON index, 8-bit grayscale
//! PNG, and CSV tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use semsteer_core::image::quantize;
use semsteer_core::shapeworld::{AttributeId, LabeledImage, SceneSpec};
use semsteer_core::GrayImage;
use serde::{Deserialize, Serialize};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Fs {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PGM: {0}")]
    Pgm(&'static str),
    #[error("malformed PNG: {0}")]
    Png(String),
    #[error("dataset index: {0}")]
    Index(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset at {0} is empty")]
    EmptyDataset(String),
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(fs_err(path))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.quantized_u8());
    out
}

/// Parses a binary (P5) graymap with 8-bit samples. Comments in the header
/// are skipped.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, IoError> {
    let mut at = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
            if bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                at += 1;
            }
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() && bytes[at] != b'#' {
            at += 1;
        }
        if start == at {
            return Err(IoError::Pgm("header ends early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| IoError::Pgm("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(IoError::Pgm("only binary P5 graymaps are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| IoError::Pgm("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(IoError::Pgm("maxval must be in 1..=255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = bytes.get(at + 1..).ok_or(IoError::Pgm("missing raster"))?;
    if w == 0 || h == 0 || raster.len() != w * h {
        return Err(IoError::Pgm("raster size does not match header"));
    }
    let pixels = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
    GrayImage::from_pixels(w, h, pixels).ok_or(IoError::Pgm("raster size does not match header"))
}

/// Encodes pixels rounded to 8 bits. Compression and filter are fixed so
/// the same image always gives the same bytes.
pub fn encode_png(img: &GrayImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Default);
        enc.set_filter(png::FilterType::NoFilter);
        enc.set_adaptive_filter(png::AdaptiveFilterType::NonAdaptive);
        let mut writer = enc.write_header().expect("png header to memory");
        writer.write_image_data(&img.quantized_u8()).expect("png data to memory");
    }
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<GrayImage, IoError> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder.read_info().map_err(|e| IoError::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| IoError::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(IoError::Png("expected 8-bit grayscale".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    GrayImage::from_u8(w, h, &buf[..w * h]).ok_or_else(|| IoError::Png("size mismatch".into()))
}

/// The image an 8-bit file of `img` decodes to.
pub fn quantized(img: &GrayImage) -> GrayImage {
    let bytes: Vec<u8> = img.pixels().iter().map(|&p| quantize(p)).collect();
    GrayImage::from_u8(img.width(), img.height(), &bytes).expect("same size")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub attribute: AttributeId,
    pub spec: SceneSpec,
}

pub type DatasetIndex = BTreeMap<String, IndexEntry>;

fn read_index(dir: &Path) -> Result<Option<DatasetIndex>, IoError> {
    let path = dir.join(INDEX_FILE);
    match std::fs::read(&path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(fs_err(&path)(e)),
    }
}

/// Writes one PGM per image, named `<attribute>_<n>.pgm`, and merges their
/// entries into the directory's index. Returns the written paths.
pub fn write_dataset(dir: &Path, images: &[LabeledImage]) -> Result<Vec<PathBuf>, IoError> {
    std::fs::create_dir_all(dir).map_err(fs_err(dir))?;
    let mut index = read_index(dir)?.unwrap_or_default();
    let mut paths = Vec::with_capacity(images.len());
    for (i, item) in images.iter().enumerate() {
        let name = format!("{}_{i:05}.pgm", item.attribute);
        let path = dir.join(&name);
        write_file(&path, &encode_pgm(&item.pixels))?;
        index.insert(
            name,
            IndexEntry {
                attribute: item.attribute,
                spec: item.spec,
            },
        );
        paths.push(path);
    }
    let json = serde_json::to_vec_pretty(&index)?;
    write_file(&dir.join(INDEX_FILE), &json)?;
    Ok(paths)
}

/// Reads every indexed image, in attribute order then file name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledImage>, IoError> {
    let index = read_index(dir)?.ok_or_else(|| IoError::EmptyDataset(dir.display().to_string()))?;
    let mut entries: Vec<(&String, &IndexEntry)> = index.iter().collect();
    entries.sort_by(|a, b| (a.1.attribute, a.0).cmp(&(b.1.attribute, b.0)));
    let mut out = Vec::with_capacity(entries.len());
    for (name, entry) in entries {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(fs_err(&path))?;
        out.push(LabeledImage {
            pixels: decode_pgm(&bytes)?,
            attribute: entry.attribute,
            spec: entry.spec,
        });
    }
    if out.is_empty() {
        return Err(IoError::EmptyDataset(dir.display().to_string()));
    }
    Ok(out)
}

/// `step,loss` rows.
pub fn loss_curve_csv(curve: &[f64]) -> Result<Vec<u8>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"])?;
    for (i, v) in curve.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()).into())
}

/// One row per α: the α value, then the score of every seed.
pub fn score_curves_csv(alphas: &[f64], curves: &[Vec<f64>]) -> Result<Vec<u8>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["alpha".to_string()];
    header.extend((0..curves.len()).map(|i| format!("seed_{i}")));
    w.write_record(&header)?;
    for (j, a) in alphas.iter().enumerate() {
        let mut row = vec![a.to_string()];
        row.extend(curves.iter().map(|c| c[j].to_string()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()).into())
}
