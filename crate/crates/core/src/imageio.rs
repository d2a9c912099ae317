//! PNG reading/writing and resizing for the on-disk dataset layout.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{FairsegError, IoContext, Result};

/// Decoded image: `channels` planes of `height*width` values scaled to [0,1]
/// by the container's maximum value.
#[derive(Debug, Clone)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).at(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| FairsegError::Load(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| FairsegError::Load(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

fn samples(info: &png::OutputInfo, buf: &[u8]) -> (Vec<u32>, u32) {
    match info.bit_depth {
        png::BitDepth::Sixteen => (
            buf.chunks(2)
                .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
                .collect(),
            u32::from(u16::MAX),
        ),
        _ => (buf.iter().map(|&b| u32::from(b)).collect(), 255),
    }
}

/// Read an image, dropping any alpha channel.
pub fn read_image(path: &Path) -> Result<Planes> {
    let (info, buf) = decode(path)?;
    let (vals, max) = samples(&info, &buf);
    let stride = info.color_type.samples();
    let channels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        _ => 3,
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = vec![0.0; channels * h * w];
    for p in 0..h * w {
        for c in 0..channels {
            data[c * h * w + p] = f64::from(vals[p * stride + c]) / f64::from(max);
        }
    }
    Ok(Planes {
        channels,
        height: h,
        width: w,
        data,
    })
}

/// Read a single-channel label mask; pixel value = class id.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (info, buf) = decode(path)?;
    let (vals, _) = samples(&info, &buf);
    let stride = info.color_type.samples();
    let (h, w) = (info.height as usize, info.width as usize);
    let mut out = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let v = vals[p * stride];
        let v = u8::try_from(v).map_err(|_| {
            FairsegError::Load(format!("{}: class id {v} too large", path.display()))
        })?;
        out.push(v);
    }
    Ok((h, w, out))
}

/// Write 8-bit grayscale.
pub fn write_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| FairsegError::Invalid(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| FairsegError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Bilinear resize of each plane (align-corners=false convention).
pub fn resize_bilinear(p: &Planes, out_h: usize, out_w: usize) -> Planes {
    if p.height == out_h && p.width == out_w {
        return p.clone();
    }
    let (h, w) = (p.height, p.width);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut data = vec![0.0; p.channels * out_h * out_w];
    for c in 0..p.channels {
        let src = &p.data[c * h * w..(c + 1) * h * w];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                data[c * out_h * out_w + oy * out_w + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Planes {
        channels: p.channels,
        height: out_h,
        width: out_w,
        data,
    }
}

/// Nearest-neighbour resize of a label mask.
pub fn resize_nearest(mask: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    if h == out_h && w == out_w {
        return mask.to_vec();
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = ((oy as f64 + 0.5) * h as f64 / out_h as f64) as usize;
        for ox in 0..out_w {
            let x = ((ox as f64 + 0.5) * w as f64 / out_w as f64) as usize;
            out.push(mask[y.min(h - 1) * w + x.min(w - 1)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let px: Vec<u8> = (0..12).map(|v| v * 20).collect();
        write_gray(&path, 4, 3, &px).unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!((img.channels, img.height, img.width), (1, 3, 4));
        assert_eq!(img.data[5], 100.0 / 255.0);
        let (h, w, m) = read_mask(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(m, px);
    }

    #[test]
    fn resize_identity_and_constant() {
        let p = Planes {
            channels: 1,
            height: 4,
            width: 4,
            data: vec![0.25; 16],
        };
        let r = resize_bilinear(&p, 2, 2);
        assert!(r.data.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert_eq!(resize_nearest(&[1, 2, 3, 4], 2, 2, 2, 2), vec![1, 2, 3, 4]);
        assert_eq!(resize_nearest(&[1, 2, 3, 4], 2, 2, 4, 4)[..4], [1, 1, 2, 2]);
    }
}
