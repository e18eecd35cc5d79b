use std::fs;
use std::path::{Path, PathBuf};

use image::{AnimationDecoder, DynamicImage, ImageBuffer, Rgb, RgbImage};
use ndarray::{Array3, Array4, Axis};

use super::{FrameSequence, ModelError};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif"];

/// Loads a directory of numbered image files (ordered by the number in the
/// file stem, then by name) or a single animated GIF.
pub fn load_frames(path: &Path) -> Result<FrameSequence, ModelError> {
    if !path.exists() {
        return Err(ModelError::MissingPath(path.display().to_string()));
    }
    let images = if path.is_dir() { load_directory(path)? } else { load_container(path)? };
    if images.is_empty() {
        return Err(ModelError::NoFrames(path.display().to_string()));
    }
    stack(images)
}

fn frame_number(p: &Path) -> Option<u64> {
    let stem = p.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn load_directory(dir: &Path) -> Result<Vec<Array3<f64>>, ModelError> {
    let io = |e| ModelError::Io { path: dir.display().to_string(), source: e };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort_by(|a, b| frame_number(a).cmp(&frame_number(b)).then_with(|| a.cmp(b)));
    files
        .iter()
        .map(|p| {
            let img = image::open(p)
                .map_err(|e| ModelError::Image { path: p.display().to_string(), reason: e.to_string() })?;
            Ok(to_array(&img))
        })
        .collect()
}

fn load_container(path: &Path) -> Result<Vec<Array3<f64>>, ModelError> {
    let img_err = |e: image::ImageError| ModelError::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let is_gif = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("gif"));
    if !is_gif {
        let img = image::open(path).map_err(img_err)?;
        return Ok(vec![to_array(&img)]);
    }
    let file = fs::File::open(path)
        .map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })?;
    let decoder = image::codecs::gif::GifDecoder::new(std::io::BufReader::new(file)).map_err(img_err)?;
    decoder
        .into_frames()
        .map(|f| f.map(|f| to_array(&DynamicImage::ImageRgba8(f.into_buffer()))).map_err(img_err))
        .collect()
}

fn to_array(img: &DynamicImage) -> Array3<f64> {
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c].clamp(0.0, 1.0) as f64
    })
}

fn stack(images: Vec<Array3<f64>>) -> Result<FrameSequence, ModelError> {
    let (h, w, _) = images[0].dim();
    for (i, im) in images.iter().enumerate() {
        let (hi, wi, _) = im.dim();
        if (hi, wi) != (h, w) {
            return Err(ModelError::InconsistentResolutions { index: i, expected: (h, w), found: (hi, wi) });
        }
    }
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    let data: Array4<f64> = ndarray::stack(Axis(0), &views).expect("shapes checked");
    FrameSequence::new(data, None)
}

/// Writes `frame_0000.png`, `frame_0001.png`, ... into `dir` (8-bit RGB PNG).
pub fn save_frames(dir: &Path, frames: &FrameSequence) -> Result<Vec<PathBuf>, ModelError> {
    fs::create_dir_all(dir).map_err(|e| ModelError::Io { path: dir.display().to_string(), source: e })?;
    let mut written = Vec::with_capacity(frames.len());
    for i in 0..frames.len() {
        let f = frames.frame(i);
        let img: RgbImage = ImageBuffer::from_fn(frames.width() as u32, frames.height() as u32, |x, y| {
            let px = |c| (f[(y as usize, x as usize, c)].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        });
        let p = dir.join(format!("frame_{i:04}.png"));
        img.save(&p).map_err(|e| ModelError::Image { path: p.display().to_string(), reason: e.to_string() })?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(dir: &Path, name: &str, size: u32, rgb: [u8; 3]) {
        RgbImage::from_pixel(size, size, Rgb(rgb)).save(dir.join(name)).unwrap();
    }

    #[test]
    fn constant_gray_directory() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..8 {
            solid(dir.path(), &format!("{i}.png"), 32, [128, 128, 128]);
        }
        let seq = load_frames(dir.path()).unwrap();
        assert_eq!((seq.len(), seq.height(), seq.width()), (8, 32, 32));
        assert!(seq.data().iter().all(|v| (v - 0.5).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn numeric_filename_order() {
        let dir = tempfile::tempdir().unwrap();
        // written out of order, and "10" sorts before "2" lexicographically
        for i in [7u8, 2, 10, 0, 5, 1, 3, 4, 6, 8, 9] {
            solid(dir.path(), &format!("frame_{i}.png"), 4, [i * 20, 0, 0]);
        }
        let seq = load_frames(dir.path()).unwrap();
        for i in 0..seq.len() {
            let expected = (i as f64 * 20.0) / 255.0;
            assert!((seq.frame(i)[(0, 0, 0)] - expected).abs() < 1e-6, "frame {i}");
        }
    }

    #[test]
    fn jpeg_frames_load() {
        let dir = tempfile::tempdir().unwrap();
        solid(dir.path(), "0.jpg", 8, [200, 200, 200]);
        solid(dir.path(), "1.jpeg", 8, [200, 200, 200]);
        let seq = load_frames(dir.path()).unwrap();
        assert_eq!(seq.len(), 2);
        // lossy, but a flat colour survives closely
        assert!(seq.data().iter().all(|v| (v - 200.0 / 255.0).abs() < 0.02));
    }

    #[test]
    fn inconsistent_resolutions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        solid(dir.path(), "0.png", 16, [0, 0, 0]);
        solid(dir.path(), "1.png", 32, [0, 0, 0]);
        let err = load_frames(dir.path()).unwrap_err();
        assert!(err.to_string().contains("inconsistent resolutions"), "{err}");
    }

    #[test]
    fn missing_and_empty() {
        assert!(matches!(load_frames(Path::new("/no/such/dir")), Err(ModelError::MissingPath(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_frames(dir.path()), Err(ModelError::NoFrames(_))));
    }

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array4::from_shape_fn((3, 4, 5, 3), |(n, y, x, c)| ((n + y + x + c) % 5) as f64 / 4.0);
        let seq = FrameSequence::new(data, None).unwrap();
        save_frames(dir.path(), &seq).unwrap();
        let back = load_frames(dir.path()).unwrap();
        for (a, b) in seq.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
    }
}
