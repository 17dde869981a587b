//! 8-bit PNG input/output and directory listing.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use dropsr::tensor::{Shape4, Tensor4};
use dropsr::{Error, ImageTensor, Result};

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Reads any 8/16-bit gray, gray-alpha, RGB or RGBA PNG as `1 x 3 x H x W`.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let file = File::open(path).map_err(|e| format_err(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(format_err(path, "unexpanded palette image")),
    };
    let stride = info.line_size;
    Ok(Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, y, x| {
        let px = y * stride + x * channels;
        let v = if channels < 3 { buf[px] } else { buf[px + c] };
        v as f32 / 255.0
    }))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first image of `img` as 8-bit RGB.
pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::invalid("write_png", format!("expected 3 channels, got {}", s.c)));
    }
    let file = File::create(path).map_err(|e| format_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), s.w as u32, s.h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut data = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                data.push(quantize(img.get(0, c, y, x)));
            }
        }
    }
    let mut writer = enc.write_header().map_err(|e| format_err(path, e))?;
    writer.write_image_data(&data).map_err(|e| format_err(path, e))?;
    writer.finish().map_err(|e| format_err(path, e))?;
    Ok(())
}

/// PNG files of `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid("input", format!("no PNG images in {}", dir.display())));
    }
    Ok(paths)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `(stem, image)` for every PNG in `dir`.
pub fn read_dir_images(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    list_pngs(dir)?
        .iter()
        .map(|p| Ok((stem(p), read_png(p)?)))
        .collect()
}
