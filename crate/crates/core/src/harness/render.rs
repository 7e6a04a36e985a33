//! Binary PPM frames; videos get one file per frame plus an index.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayView3};

use crate::error::{Error, Result};

/// Encode one `(height, width, 3)` frame in `[0, 1]`, each pixel blown up
/// to a `scale x scale` block.
pub fn ppm_bytes(frame: ArrayView3<'_, f32>, scale: usize) -> Vec<u8> {
    let (h, w, _) = frame.dim();
    let scale = scale.max(1);
    let mut out = format!("P6\n{} {}\n255\n", w * scale, h * scale).into_bytes();
    for y in 0..h * scale {
        for x in 0..w * scale {
            for c in 0..3 {
                out.push((frame[[y / scale, x / scale, c]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Write `stem.ppm` for a single frame, or `stem_f000.ppm`... and
/// `stem.index` (one file name per line) for a video. Returns the paths.
pub fn write_clip(dir: &Path, stem: &str, clip: &Array4<f32>, scale: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames = clip.dim().0;
    let mut written = Vec::new();
    if frames == 1 {
        let p = dir.join(format!("{stem}.ppm"));
        fs::write(&p, ppm_bytes(clip.index_axis(ndarray::Axis(0), 0), scale)).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        return Ok(written);
    }
    let mut index = String::new();
    for f in 0..frames {
        let name = format!("{stem}_f{f:03}.ppm");
        let p = dir.join(&name);
        fs::write(&p, ppm_bytes(clip.index_axis(ndarray::Axis(0), f), scale)).map_err(|e| Error::io(&p, e))?;
        index.push_str(&name);
        index.push('\n');
        written.push(p);
    }
    let p = dir.join(format!("{stem}.index"));
    fs::write(&p, index).map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_size() {
        let clip = Array4::from_elem((1, 2, 3, 3), 1.0f32);
        let b = ppm_bytes(clip.index_axis(ndarray::Axis(0), 0), 2);
        let header = b"P6\n6 4\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(b.len(), header.len() + 6 * 4 * 3);
        assert!(b[header.len()..].iter().all(|&v| v == 255));
    }

    #[test]
    fn video_gets_index() {
        let dir = tempfile::tempdir().unwrap();
        let clip = Array4::zeros((3, 2, 2, 3));
        let files = write_clip(dir.path(), "v", &clip, 1).unwrap();
        assert_eq!(files.len(), 4);
        let index = fs::read_to_string(dir.path().join("v.index")).unwrap();
        assert_eq!(index.lines().collect::<Vec<_>>(), ["v_f000.ppm", "v_f001.ppm", "v_f002.ppm"]);
    }
}
