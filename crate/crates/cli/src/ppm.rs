//! Binary portable pixmaps (P6, maxval 255) and image-directory datasets.

use cagn_core::data::Dataset;
use cagn_core::{Error, Result, Tensor};
use std::path::Path;

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Encodes image `index` of a `[N, 3, H, W]` batch.
pub fn encode(images: &Tensor<f32>, index: usize) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || index >= s[0] {
        return Err(Error::Contract(format!("cannot encode image {} of {:?} as RGB", index, s)));
    }
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let base = index * 3 * plane;
    let d = images.data();
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[base + c * plane + p]));
        }
    }
    Ok(out)
}

/// Tiles `rows` batches of equal shape into one sheet, one batch per row.
pub fn sheet(rows: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = rows.first().ok_or_else(|| Error::Contract("empty sample sheet".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 4 || rows.iter().any(|r| r.shape() != s.as_slice()) {
        return Err(Error::Contract("sheet rows must share one [N, C, H, W] shape".into()));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (sh, sw) = (rows.len() * h, n * w);
    let mut out = vec![0f32; c * sh * sw];
    for (ri, r) in rows.iter().enumerate() {
        let d = r.data();
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    let src = ((i * c + ch) * h + y) * w;
                    let dst = (ch * sh + ri * h + y) * sw + i * w;
                    out[dst..dst + w].copy_from_slice(&d[src..src + w]);
                }
            }
        }
    }
    Tensor::new(vec![1, c, sh, sw], out)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decodes a P6 file into `[1, 3, H, W]` in `[-1, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != "P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let mut num = || -> Result<usize> {
        header_token(bytes, &mut pos)?.parse().map_err(|_| Error::Format("bad PPM header number".into()))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {} unsupported (need 255)", maxval)));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * 3 {
        return Err(Error::Format(format!("PPM body has {} bytes, expected {}", body.len(), w * h * 3)));
    }
    let plane = w * h;
    let mut out = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = from_byte(body[p * 3 + c]);
        }
    }
    Tensor::new(vec![1, 3, h, w], out)
}

/// Every `*.ppm` in `dir` in file-name order, with labels read one per line
/// from `labels` (all 0 when absent).
pub fn load_dir(dir: &Path, labels: Option<&Path>, size: usize) -> Result<Dataset> {
    let rd = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("image directory {}", dir.display())),
        _ => Error::Io(format!("{}: {}", dir.display(), e)),
    })?;
    let mut files: Vec<_> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NotFound(format!("no .ppm images in {}", dir.display())));
    }
    let mut imgs = Vec::with_capacity(files.len());
    for f in &files {
        let t = decode(&std::fs::read(f)?)?;
        if t.shape()[2] != size || t.shape()[3] != size {
            return Err(Error::Format(format!("{} is {:?}, expected {}x{}", f.display(), &t.shape()[2..], size, size)));
        }
        imgs.push(t);
    }
    let labels = match labels {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|_| Error::NotFound(format!("labels file {}", p.display())))?;
            let ls = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.trim().parse::<usize>().map_err(|_| Error::Format(format!("bad label {:?}", l))))
                .collect::<Result<Vec<_>>>()?;
            if ls.len() != files.len() {
                return Err(Error::Format(format!("{} labels for {} images", ls.len(), files.len())));
            }
            ls
        }
        None => vec![0; files.len()],
    };
    let refs: Vec<&Tensor<f32>> = imgs.iter().collect();
    let n_labels = labels.iter().max().map_or(1, |m| m + 1);
    Ok(Dataset { images: Tensor::cat_rows(&refs)?, labels, n_labels })
}

pub fn write(path: &Path, images: &Tensor<f32>, index: usize) -> Result<()> {
    std::fs::write(path, encode(images, index)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let t = Tensor::from_fn(&[2, 3, 4, 5], |i| ((i % 256) as f32 / 127.5) - 1.0);
        let bytes = encode(&t, 1).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back, 0).unwrap(), bytes);
        assert_eq!(back.shape(), &[1, 3, 4, 5]);
    }

    #[test]
    fn sheet_places_rows() {
        let a = Tensor::full(&[2, 3, 2, 2], 0.5f32);
        let b = Tensor::full(&[2, 3, 2, 2], -0.5f32);
        let s = sheet(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[1, 3, 4, 4]);
        assert_eq!(s.data()[0], 0.5);
        assert_eq!(s.data()[2 * 4], -0.5);
    }
}
