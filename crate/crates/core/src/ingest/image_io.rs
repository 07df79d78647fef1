//! 8-bit PNG/PPM color images and world-file sidecars.

use std::path::Path;

use image::{ColorType, ImageFormat, RgbImage, RgbaImage};

use crate::rasters::{ColorImage, RasterGrid};

use super::{read_bytes, write_bytes, IngestError};

pub fn read_color_image(path: &Path) -> Result<ColorImage, IngestError> {
    let bytes = read_bytes(path)?;
    let fail = |reason: String| IngestError::Image {
        path: path.to_path_buf(),
        reason,
    };
    let format = image::guess_format(&bytes).map_err(|e| fail(e.to_string()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(fail(format!("unsupported format {format:?}; expected PNG or PPM")));
    }
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| fail(e.to_string()))?;
    match img.color() {
        ColorType::Rgb8 | ColorType::Rgba8 | ColorType::L8 | ColorType::La8 => {}
        other => return Err(fail(format!("unsupported pixel type {other:?}; expected 8-bit"))),
    }
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.pixels().map(|p| p.0).collect();
    Ok(ColorImage::new(w as usize, h as usize, pixels)?)
}

fn encode_png(img: image::DynamicImage, path: &Path) -> Result<(), IngestError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| IngestError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    write_bytes(path, &buf.into_inner())
}

pub fn write_png_rgb(img: &ColorImage, path: &Path) -> Result<(), IngestError> {
    let raw: Vec<u8> = img.pixels().iter().flat_map(|p| p.iter().copied()).collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer matches dimensions");
    encode_png(image::DynamicImage::ImageRgb8(buf), path)
}

/// Writes RGBA; `None` pixels become fully transparent.
pub fn write_png_rgba(
    width: usize,
    height: usize,
    pixels: &[Option<[u8; 3]>],
    path: &Path,
) -> Result<(), IngestError> {
    let raw: Vec<u8> = pixels
        .iter()
        .flat_map(|p| match p {
            Some([r, g, b]) => [*r, *g, *b, 255],
            None => [0, 0, 0, 0],
        })
        .collect();
    let buf = RgbaImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| IngestError::Image {
            path: path.to_path_buf(),
            reason: "pixel count does not match dimensions".into(),
        })?;
    encode_png(image::DynamicImage::ImageRgba8(buf), path)
}

/// Six-line world file: pixel size x, rotations, negative pixel size y, then
/// the world coordinates of the upper-left pixel center.
pub fn write_world_file(grid: &RasterGrid, path: &Path) -> Result<(), IngestError> {
    let (x, y) = grid.cell_center(0, 0)?;
    let text = format!(
        "{}\n0\n0\n{}\n{}\n{}\n",
        grid.cell_size, -grid.cell_size, x, y
    );
    write_bytes(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ColorImage::new(3, 2, (0..6u8).map(|i| [i, 2 * i, 255 - i]).collect()).unwrap();
        write_png_rgb(&img, &path).unwrap();
        assert_eq!(read_color_image(&path).unwrap(), img);
    }

    #[test]
    fn ppm_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend([1, 2, 3, 4, 5, 6]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_color_image(&path).unwrap();
        assert_eq!(img.pixels(), &[[1, 2, 3], [4, 5, 6]]);
    }

    #[test]
    fn missing_image() {
        assert!(matches!(
            read_color_image(Path::new("/nonexistent/x.png")),
            Err(IngestError::MissingFile(_))
        ));
    }
}
