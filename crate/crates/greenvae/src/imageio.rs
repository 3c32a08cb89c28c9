//! Binary PPM (P6) / PGM (P5) image output and input: bit-exact, 8-bit,
//! codec-free. Grids place tiles left-to-right with 2-pixel black gutters.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GUTTER: usize = 2;

/// Quantize [0,1] to a byte; values outside the range clamp and are counted.
fn to_byte(v: f32, clamped: &mut usize) -> u8 {
    if !(0.0..=1.0).contains(&v) {
        *clamped += 1;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write one [H,W,C] image (C = 1 or 3). Returns the clamp-warning count.
pub fn write_image(image: &Tensor<f32>, path: &Path) -> Result<usize> {
    let shape = image.shape();
    if shape.len() != 3 || (shape[2] != 1 && shape[2] != 3) {
        return Err(Error::data(format!(
            "write_image expects [H,W,1] or [H,W,3], got {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut clamped = 0usize;
    let mut payload = Vec::with_capacity(h * w * c);
    for &v in image.data() {
        payload.push(to_byte(v, &mut clamped));
    }
    let header = if c == 1 {
        format!("P5\n{w} {h}\n255\n")
    } else {
        format!("P6\n{w} {h}\n255\n")
    };
    let mut f = std::fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    f.write_all(&payload)?;
    Ok(clamped)
}

/// Lay out [N,H,W,C] images on a canvas with `cols` columns and 2-pixel
/// black gutters between tiles (no outer border), then write PGM/PPM.
/// Returns the clamp-warning count.
pub fn write_image_grid(images: &Tensor<f32>, cols: usize, path: &Path) -> Result<usize> {
    let shape = images.shape();
    if shape.len() != 4 || (shape[3] != 1 && shape[3] != 3) {
        return Err(Error::data(format!(
            "write_image_grid expects [N,H,W,1|3], got {shape:?}"
        )));
    }
    if cols == 0 {
        return Err(Error::data("grid needs cols > 0"));
    }
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if n == 0 {
        return Err(Error::data("grid needs at least one image"));
    }
    let rows = n.div_ceil(cols);
    let canvas_h = rows * h + (rows - 1) * GUTTER;
    let canvas_w = cols * w + (cols - 1) * GUTTER;
    let mut canvas = Tensor::<f32>::zeros(&[canvas_h, canvas_w, c]);
    for i in 0..n {
        let (r, col) = (i / cols, i % cols);
        let y0 = r * (h + GUTTER);
        let x0 = col * (w + GUTTER);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    canvas.data_mut()[((y0 + y) * canvas_w + x0 + x) * c + ch] =
                        images.data()[((i * h + y) * w + x) * c + ch];
                }
            }
        }
    }
    write_image(&canvas, path)
}

/// Read a binary P5/P6 image back as [H,W,C] in [0,1].
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        }
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data("truncated image header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).to_string())
    };
    let magic = token(&bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1usize,
        "P6" => 3usize,
        other => return Err(Error::data(format!("unsupported image magic '{other}'"))),
    };
    let w: usize = token(&bytes)?.parse().map_err(|_| Error::data("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| Error::data("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| Error::data("bad maxval"))?;
    if maxval != 255 {
        return Err(Error::data(format!("only 8-bit images supported, maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::data(format!(
            "truncated pixel payload: have {}, need {need}",
            bytes.len() - pos
        )));
    }
    let data: Vec<f32> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(Tensor::new(&[h, w, channels], data))
}

/// Load every .pgm/.ppm file in a directory (sorted by name) as one [N,H,W,C]
/// batch; shapes must agree.
pub fn read_image_dir(dir: &Path) -> Result<Tensor<f32>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("ppm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(format!("no .pgm/.ppm images in {}", dir.display())));
    }
    let first = read_image(&paths[0])?;
    let shape = first.shape().to_vec();
    let mut data = first.into_data();
    for p in &paths[1..] {
        let img = read_image(p)?;
        if img.shape() != &shape[..] {
            return Err(Error::data(format!(
                "image {} has shape {:?}, expected {:?}",
                p.display(),
                img.shape(),
                shape
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![paths.len()];
    full.extend_from_slice(&shape);
    Ok(Tensor::new(&full, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_square_is_four_255_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.pgm");
        let img = Tensor::filled(&[2, 2, 1], 1.0f32);
        let clamped = write_image(&img, &p).unwrap();
        assert_eq!(clamped, 0);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..3], b"P5\n");
        assert_eq!(&bytes[bytes.len() - 4..], &[255u8, 255, 255, 255]);
    }

    #[test]
    fn grid_canvas_arithmetic() {
        // 64 images at cols=8: canvas is 8H + 7*2 gutters on each axis.
        let imgs = Tensor::filled(&[64, 4, 4, 1], 0.5f32);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        write_image_grid(&imgs, 8, &p).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), &[8 * 4 + 14, 8 * 4 + 14, 1]);
    }

    #[test]
    fn out_of_range_clamps_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let img = Tensor::new(&[1, 3, 1], vec![-0.5f32, 0.5, 1.5]);
        let clamped = write_image(&img, &p).unwrap();
        assert_eq!(clamped, 2);
        let back = read_image(&p).unwrap();
        assert_eq!(back.data(), &[0.0, 0.5019608, 1.0]);
    }

    #[test]
    fn rgb_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let img = Tensor::new(&[2, 1, 3], vec![0.0f32, 0.5, 1.0, 1.0, 0.0, 0.25]);
        write_image(&img, &p).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), &[2, 1, 3]);
        assert!((back.data()[1] - 0.5).abs() < 0.01);
    }

    #[test]
    fn read_dir_stacks_images() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            let img = Tensor::filled(&[2, 2, 1], i as f32 * 0.3);
            write_image(&img, &dir.path().join(format!("img_{i}.pgm"))).unwrap();
        }
        let batch = read_image_dir(dir.path()).unwrap();
        assert_eq!(batch.shape(), &[3, 2, 2, 1]);
    }
}
