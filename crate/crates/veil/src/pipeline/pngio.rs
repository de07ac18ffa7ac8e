//! 8-bit RGB PNG interchange.
//!
//! Pixels map linearly between [0, 255] and [-1, 1]. Every file the
//! toolkit writes carries the run's config hash and seed as tEXt chunks,
//! and all writes go through a temp-then-rename so readers never observe
//! a half-written artifact. The quantization itself is lossy; protection
//! outputs pass through it before any evaluation, like a deployed image
//! would.

use crate::diffusion::LatentImage;
use crate::error::{Result, VeilError};
use crate::tensor::Tensor;
use ndarray::Array3;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

pub const HASH_KEYWORD: &str = "veil-config-hash";
pub const SEED_KEYWORD: &str = "veil-seed";

/// Hard edge on accepted image dimensions; keeps decode allocations
/// bounded long before the codec's own byte limit.
pub const MAX_SIDE: usize = 4096;

/// Run metadata embedded in artifacts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub seed: u64,
}

/// [-1, 1] to one byte, clamping out-of-range values.
pub fn quantize_unit(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

/// One byte back to [-1, 1].
pub fn dequantize_unit(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

fn codec(e: impl std::fmt::Display) -> VeilError {
    VeilError::Codec(format!("png: {e}"))
}

/// Encode to PNG bytes with metadata chunks. Deterministic: identical
/// tensors and metadata give identical bytes.
pub fn encode_png(x: &Tensor, meta: &ArtifactMeta) -> Result<Vec<u8>> {
    let (c, h, w) = x.dim();
    if c != 3 {
        return Err(VeilError::Parameter(format!(
            "png interchange needs 3 channels, got {c}"
        )));
    }
    if h == 0 || w == 0 || h > MAX_SIDE || w > MAX_SIDE {
        return Err(VeilError::Parameter(format!(
            "image dimensions {h}x{w} outside 1..={MAX_SIDE}"
        )));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                data.push(quantize_unit(x[[ch, i, j]]));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk(HASH_KEYWORD.to_string(), meta.config_hash.clone())
            .map_err(codec)?;
        enc.add_text_chunk(SEED_KEYWORD.to_string(), meta.seed.to_string())
            .map_err(codec)?;
        let mut writer = enc.write_header().map_err(codec)?;
        writer.write_image_data(&data).map_err(codec)?;
        writer.finish().map_err(codec)?;
    }
    Ok(out)
}

/// Decode PNG bytes. Accepts exactly the interchange format (8-bit RGB)
/// and never panics on malformed input. Metadata comes back when both
/// chunks are present and well formed.
pub fn decode_png(bytes: &[u8]) -> Result<(LatentImage, Option<ArtifactMeta>)> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(codec)?;
    {
        // reject before allocating the frame buffer
        let hdr = reader.info();
        let (w, h) = (hdr.width as usize, hdr.height as usize);
        if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
            return Err(VeilError::Codec(format!(
                "png dimensions {h}x{w} outside 1..={MAX_SIDE}"
            )));
        }
        if hdr.color_type != png::ColorType::Rgb || hdr.bit_depth != png::BitDepth::Eight {
            return Err(VeilError::Codec(format!(
                "interchange format is 8-bit RGB, got {:?} {:?}",
                hdr.color_type, hdr.bit_depth
            )));
        }
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| VeilError::Codec("png output size overflows".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(codec)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let pixels = &buf[..frame.buffer_size()];
    if pixels.len() != 3 * h * w {
        return Err(VeilError::Codec(format!(
            "frame size {} does not match {h}x{w} RGB",
            pixels.len()
        )));
    }
    let data = Array3::from_shape_fn((3, h, w), |(ch, i, j)| {
        dequantize_unit(pixels[(i * w + j) * 3 + ch])
    });

    let texts = &reader.info().uncompressed_latin1_text;
    let find = |k: &str| texts.iter().find(|t| t.keyword == k).map(|t| t.text.clone());
    let meta = match (find(HASH_KEYWORD), find(SEED_KEYWORD)) {
        (Some(config_hash), Some(seed_text)) => seed_text
            .parse::<u64>()
            .ok()
            .map(|seed| ArtifactMeta { config_hash, seed }),
        _ => None,
    };
    Ok((LatentImage::new(data), meta))
}

/// Write via a temporary file in the same directory, then rename. Creates
/// parent directories as needed.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent)?;
    let name = path
        .file_name()
        .ok_or_else(|| VeilError::Parameter(format!("not a file path: {}", path.display())))?;
    let tmp = parent.join(format!(".{}.tmp", name.to_string_lossy()));
    let write = || -> Result<()> {
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    };
    write().map_err(|e| e.with_context(format!("writing {}", path.display())))
}

pub fn write_png_atomic(path: &Path, x: &Tensor, meta: &ArtifactMeta) -> Result<()> {
    write_bytes_atomic(path, &encode_png(x, meta)?)
}

pub fn read_png(path: &Path) -> Result<(LatentImage, Option<ArtifactMeta>)> {
    let bytes =
        fs::read(path).map_err(|e| VeilError::Codec(format!("cannot read {}: {e}", path.display())))?;
    decode_png(&bytes).map_err(|e| e.with_context(path.display().to_string()))
}

/// Sorted `.png` paths in a directory; empty is an error because every
/// command needs at least one input.
pub fn list_png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(VeilError::Parameter(format!(
            "input directory {} does not exist",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(VeilError::Parameter(format!(
            "no inputs: {} contains no .png files",
            dir.display()
        )));
    }
    Ok(files)
}

/// File stem used as the image's name in reports and output filenames.
pub fn image_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Load a whole directory as a named batch, sorted by name (stem order,
/// which can differ from path order when stems contain dots).
pub fn read_image_dir(dir: &Path) -> Result<Vec<(String, LatentImage)>> {
    let mut batch: Vec<(String, LatentImage)> = list_png_files(dir)?
        .iter()
        .map(|p| Ok((image_name(p), read_png(p)?.0)))
        .collect::<Result<_>>()?;
    batch.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn quantization_endpoints_and_round_trip() {
        assert_eq!(quantize_unit(-1.0), 0);
        assert_eq!(quantize_unit(1.0), 255);
        assert_eq!(quantize_unit(-3.0), 0);
        assert_eq!(quantize_unit(3.0), 255);
        assert_eq!(quantize_unit(0.0), 128);
        for b in 0..=255u8 {
            assert_eq!(quantize_unit(dequantize_unit(b)), b);
        }
    }

    #[test]
    fn png_round_trip_preserves_quantized_pixels_and_meta() {
        let x = Array3::from_shape_fn((3, 9, 13), |(c, i, j)| {
            ((c * 31 + i * 7 + j * 3) as f64 * 0.17).sin() * 0.9
        });
        let meta = ArtifactMeta {
            config_hash: "abc123".into(),
            seed: 42,
        };
        let bytes = encode_png(&x, &meta).unwrap();
        let (img, got) = decode_png(&bytes).unwrap();
        assert_eq!(img.shape(), (3, 9, 13));
        assert_eq!(img.timestep, 0);
        assert_eq!(got, Some(meta.clone()));
        for ((c, i, j), &v) in img.data.indexed_iter() {
            let expect = dequantize_unit(quantize_unit(x[[c, i, j]]));
            assert_eq!(v, expect);
            assert!((v - x[[c, i, j]]).abs() <= 1.0 / 255.0 + 1e-12);
        }
        // byte determinism
        assert_eq!(bytes, encode_png(&x, &meta).unwrap());
    }

    #[test]
    fn decode_rejects_malformed_and_foreign_formats() {
        assert!(decode_png(b"").is_err());
        assert!(decode_png(b"\x89PNG\r\n\x1a\n").is_err());
        let x = Array3::zeros((3, 8, 8));
        let meta = ArtifactMeta {
            config_hash: String::new(),
            seed: 0,
        };
        let good = encode_png(&x, &meta).unwrap();
        assert!(decode_png(&good[..good.len() / 2]).is_err());

        // grayscale is not the interchange format
        let mut gray = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut gray, 4, 4);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 16]).unwrap();
            w.finish().unwrap();
        }
        let err = decode_png(&gray).unwrap_err();
        assert!(format!("{err}").contains("RGB"), "{err}");
    }

    #[test]
    fn missing_meta_chunks_are_not_an_error() {
        let mut plain = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut plain, 2, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[128u8; 12]).unwrap();
            w.finish().unwrap();
        }
        let (img, meta) = decode_png(&plain).unwrap();
        assert_eq!(img.shape(), (3, 2, 2));
        assert_eq!(meta, None);
    }

    #[test]
    fn directory_listing_is_sorted_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        let err = list_png_files(dir.path()).unwrap_err();
        assert!(format!("{err}").contains("no inputs"), "{err}");

        let x = Array3::zeros((3, 8, 8));
        let meta = ArtifactMeta {
            config_hash: "h".into(),
            seed: 1,
        };
        for name in ["b.png", "a.png", "c.txt"] {
            let p = dir.path().join(name);
            if name.ends_with(".png") {
                write_png_atomic(&p, &x, &meta).unwrap();
            } else {
                std::fs::write(&p, b"not a png").unwrap();
            }
        }
        let files = list_png_files(dir.path()).unwrap();
        let names: Vec<String> = files.iter().map(|p| image_name(p)).collect();
        assert_eq!(names, vec!["a", "b"]);
        let batch = read_image_dir(dir.path()).unwrap();
        assert_eq!(batch[0].0, "a");
        assert_eq!(batch[1].0, "b");
        // no stray temp files after atomic writes
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_bytes_atomic(&p, b"one").unwrap();
        write_bytes_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
    }
}
