//! Random inputs for oracle comparisons. Coordinates sit on a coarse grid
//! and scores come from a small set so that IoU ties, exact-threshold
//! overlaps and equal scores all occur regularly.
#![allow(dead_code)]

use pecas_core::detector::{BBox, Detection};
use pecas_core::rng::Rng;

pub fn grid_box(rng: &mut Rng) -> BBox {
    let x = rng.below(6) as f64 * 2.0;
    let y = rng.below(6) as f64 * 2.0;
    let w = 2.0 + rng.below(5) as f64 * 2.0;
    let h = 2.0 + rng.below(5) as f64 * 2.0;
    BBox::new(x, y, w, h)
}

pub fn coarse_score(rng: &mut Rng) -> f64 {
    (1 + rng.below(6)) as f64 / 8.0
}

pub fn detections(rng: &mut Rng, max: usize) -> Vec<Detection> {
    let n = rng.below(max as u64 + 1) as usize;
    (0..n).map(|_| Detection { bbox: grid_box(rng), score: coarse_score(rng) }).collect()
}

/// Up to `max_dets` detections spread over 1 to 3 images, each image with
/// 0 to 3 ground-truth boxes.
pub fn ap_case(rng: &mut Rng, max_dets: usize) -> (Vec<Vec<Detection>>, Vec<Vec<BBox>>) {
    let images = 1 + rng.below(3) as usize;
    let gt: Vec<Vec<BBox>> = (0..images).map(|_| (0..rng.below(4)).map(|_| grid_box(rng)).collect()).collect();
    let mut dets = vec![Vec::new(); images];
    for _ in 0..rng.below(max_dets as u64 + 1) {
        let img = rng.below(images as u64) as usize;
        // half the detections are jittered copies of a ground-truth box
        let bbox = match gt[img].len() {
            n if n > 0 && rng.below(2) == 0 => {
                let g = gt[img][rng.below(n as u64) as usize];
                BBox::new(g.x + rng.below(3) as f64 - 1.0, g.y, g.w, g.h + rng.below(3) as f64)
            }
            _ => grid_box(rng),
        };
        dets[img].push(Detection { bbox, score: coarse_score(rng) });
    }
    (dets, gt)
}
