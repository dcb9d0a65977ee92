//! Box overlays for explanation records.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::backend::ModelBundle;
use crate::error::{Error, Result};
use crate::record::ExplanationRecord;
use crate::types::PixelBox;

/// Outline colour per feature rank (1-based), cycling after the last entry.
pub const RANK_COLORS: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [240, 50, 230],
];

pub fn rank_color(rank: usize) -> Rgb<u8> {
    Rgb(RANK_COLORS[(rank.max(1) - 1) % RANK_COLORS.len()])
}

/// One-pixel outline on the box's outermost rows and columns, clipped to the
/// image.
pub fn draw_box(img: &mut RgbImage, b: &PixelBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if b.top >= h || b.left >= w {
        return;
    }
    let bottom = b.bottom.min(h) - 1;
    let right = b.right.min(w) - 1;
    for x in b.left..=right {
        img.put_pixel(x as u32, b.top as u32, color);
        img.put_pixel(x as u32, bottom as u32, color);
    }
    for y in b.top..=bottom {
        img.put_pixel(b.left as u32, y as u32, color);
        img.put_pixel(right as u32, y as u32, color);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFiles {
    pub overlay: PathBuf,
    pub neighbors: Vec<PathBuf>,
    pub composite: PathBuf,
}

const GAP: u32 = 2;

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `<stem>.overlay.png`, one `<stem>.neighbor<rank>.png` per feature and
/// `<stem>.composite.png`, all at model input resolution.
pub fn render_explanation(
    bundle: &ModelBundle,
    record: &ExplanationRecord,
    out_dir: impl AsRef<Path>,
    stem: &str,
) -> Result<RenderedFiles> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut overlay = bundle.to_rgb(&bundle.load_image(&record.test_image_path)?);
    for f in &record.features {
        draw_box(&mut overlay, &f.test_box, rank_color(f.rank));
    }
    let mut neighbor_imgs = Vec::new();
    for f in &record.features {
        let mut img = bundle.to_rgb(&bundle.load_image(&f.neighbor_image_path)?);
        draw_box(&mut img, &f.neighbor_box, rank_color(f.rank));
        neighbor_imgs.push((f.rank, img));
    }

    let overlay_path = out_dir.join(format!("{stem}.overlay.png"));
    save(&overlay, &overlay_path)?;
    let mut neighbors = Vec::new();
    for (rank, img) in &neighbor_imgs {
        let p = out_dir.join(format!("{stem}.neighbor{rank}.png"));
        save(img, &p)?;
        neighbors.push(p);
    }

    let (w, h) = overlay.dimensions();
    let tiles = 1 + neighbor_imgs.len() as u32;
    let mut composite = RgbImage::from_pixel(tiles * w + (tiles - 1) * GAP, h, Rgb([255, 255, 255]));
    image::imageops::replace(&mut composite, &overlay, 0, 0);
    for (k, (_, img)) in neighbor_imgs.iter().enumerate() {
        let x = (k as u32 + 1) * (w + GAP);
        image::imageops::replace(&mut composite, img, x as i64, 0);
    }
    let composite_path = out_dir.join(format!("{stem}.composite.png"));
    save(&composite, &composite_path)?;

    Ok(RenderedFiles {
        overlay: overlay_path,
        neighbors,
        composite: composite_path,
    })
}
