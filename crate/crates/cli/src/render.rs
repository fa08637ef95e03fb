use std::collections::BTreeMap;

use hierkit_core::decoder::Entity;
use image::RgbaImage;

pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Palette slot per cluster id. Each id hashes to a slot; on a collision
/// within the image the next free slot is taken, so up to 12 clusters always
/// get distinct colors.
pub fn cluster_colors(clusters: impl IntoIterator<Item = usize>) -> BTreeMap<usize, [u8; 3]> {
    let ids: std::collections::BTreeSet<usize> = clusters.into_iter().collect();
    let mut used = [false; PALETTE.len()];
    let mut out = BTreeMap::new();
    for id in ids {
        let start = (splitmix64(id as u64) % PALETTE.len() as u64) as usize;
        let slot = (0..PALETTE.len())
            .map(|k| (start + k) % PALETTE.len())
            .find(|&s| !used[s])
            .unwrap_or(start);
        used[slot] = true;
        out.insert(id, PALETTE[slot]);
    }
    out
}

/// Cluster of an entity, falling back to its own id when unclustered.
fn group(e: &Entity) -> usize {
    e.cluster.unwrap_or(e.id)
}

/// Alpha-blends each entity mask onto `img`. Masks of a different size are
/// resized by nearest neighbour to the image.
pub fn overlay(img: &mut RgbaImage, entities: &[Entity], opacity: f64) {
    let colors = cluster_colors(entities.iter().map(group));
    let (w, h) = (img.width() as usize, img.height() as usize);
    for e in entities {
        let color = colors[&group(e)];
        let resized;
        let mask = if e.mask.dims() == (w, h) {
            &e.mask
        } else {
            log::info!("entity {}: resizing {:?} mask to {}x{}", e.id, e.mask.dims(), w, h);
            resized = e.mask.resize_nearest(w, h);
            &resized
        };
        for p in mask.iter_ones() {
            let px = img.get_pixel_mut((p % w) as u32, (p / w) as u32);
            for (c, &target) in px.0[..3].iter_mut().zip(&color) {
                *c = ((1.0 - opacity) * f64::from(*c) + opacity * f64::from(target)).round() as u8;
            }
        }
    }
}
