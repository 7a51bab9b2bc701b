//! Deliberately naive reference implementations. Each one is written from
//! the definition, without sharing code or loop structure with the library.
#![allow(dead_code)]

use pecas_core::detector::{BBox, Detection};
use pecas_core::Tensor;

/// Convolution over an explicitly zero-padded copy of the input, one output
/// element at a time.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Tensor {
    let [c, h, w] = input.shape()[..] else { panic!("input rank") };
    let [f, _, kh, kw] = kernels.shape()[..] else { panic!("kernel rank") };
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let mut padded = vec![vec![vec![0.0; pw]; ph]; c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                padded[ch][y + padding][x + padding] = input.data()[(ch * h + y) * w + x];
            }
        }
    }
    let oh = (ph - kh) / stride + 1;
    let ow = (pw - kw) / stride + 1;
    let k = |fi: usize, ch: usize, i: usize, j: usize| kernels.data()[((fi * c + ch) * kh + i) * kw + j];
    let mut out = Vec::with_capacity(f * oh * ow);
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ch in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            acc += padded[ch][oy * stride + i][ox * stride + j] * k(fi, ch, i, j);
                        }
                    }
                }
                out.push(acc + bias.data()[fi]);
            }
        }
    }
    Tensor::new(vec![f, oh, ow], out).unwrap()
}

/// 2x2 stride-2 max pooling by scanning each window.
pub fn maxpool2(input: &Tensor) -> Tensor {
    let [c, h, w] = input.shape()[..] else { panic!("input rank") };
    let (oh, ow) = (h / 2, w / 2);
    let at = |ch: usize, y: usize, x: usize| input.data()[(ch * h + y) * w + x];
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let window = [
                    at(ch, 2 * oy, 2 * ox),
                    at(ch, 2 * oy, 2 * ox + 1),
                    at(ch, 2 * oy + 1, 2 * ox),
                    at(ch, 2 * oy + 1, 2 * ox + 1),
                ];
                out.push(window.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).unwrap()
}

pub fn area_iou(a: &BBox, b: &BBox) -> f64 {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y1 = (a.y + a.h).min(b.y + b.h);
    let inter = (x1 - x0).max(0.0) * (y1 - y0).max(0.0);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// `true` when detection `a` outranks `b`: higher score, or equal score and
/// earlier position.
fn outranks(dets: &[Detection], a: usize, b: usize) -> bool {
    dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b)
}

/// Greedy NMS characterised as a fixed point: the kept set `S` is the unique
/// subset in which a detection belongs to `S` exactly when no higher-ranked
/// member of `S` overlaps it by more than the threshold. Found by trying
/// every subset. Returned in rank order.
pub fn nms_subsets(dets: &[Detection], threshold: f64) -> Vec<usize> {
    let n = dets.len();
    assert!(n <= 16, "subset enumeration is exponential");
    let mut found: Vec<Vec<usize>> = Vec::new();
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| member(j) && outranks(dets, j, i) && area_iou(&dets[j].bbox, &dets[i].bbox) > threshold);
            member(i) == !blocked
        });
        if consistent {
            found.push((0..n).filter(|&i| member(i)).collect());
        }
    }
    assert_eq!(found.len(), 1, "greedy NMS fixed point must be unique");
    let mut keep = found.pop().unwrap();
    keep.sort_by(|&a, &b| if outranks(dets, a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    keep
}

/// Average precision evaluated at each attained recall level `j/G`: the
/// interpolated precision there is the best precision at any cut-off whose
/// recall reaches `j/G`.
pub fn average_precision(dets: &[Vec<Detection>], gt: &[Vec<BBox>], match_iou: f64) -> f64 {
    let total_gt: usize = gt.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return 0.0;
    }
    // rank: by score descending, ties by (image, position)
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (img, list) in dets.iter().enumerate() {
        for (k, d) in list.iter().enumerate() {
            all.push((d.score, img, k));
        }
    }
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 && all[j].0 > all[j - 1].0 {
            all.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut cumulative_tp = Vec::new();
    let mut tp = 0;
    for &(_, img, k) in &all {
        let det = &dets[img][k];
        let mut best = None;
        let mut best_iou = -1.0;
        for (gi, g) in gt[img].iter().enumerate() {
            let o = area_iou(&det.bbox, g);
            if !used[img][gi] && o > best_iou {
                best_iou = o;
                best = Some(gi);
            }
        }
        if let Some(gi) = best {
            if best_iou >= match_iou {
                used[img][gi] = true;
                tp += 1;
            }
        }
        cumulative_tp.push(tp);
    }
    let mut sum = 0.0;
    for level in 1..=tp {
        let mut best: f64 = 0.0;
        for (rank, &t) in cumulative_tp.iter().enumerate() {
            if t >= level {
                best = best.max(t as f64 / (rank + 1) as f64);
            }
        }
        sum += best;
    }
    sum / total_gt as f64
}

/// Confusion counts by direct tally.
pub fn confusion(labels: &[usize], predictions: &[usize]) -> (usize, usize, usize, usize) {
    let count = |l: usize, p: usize| labels.iter().zip(predictions).filter(|&(&a, &b)| a == l && b == p).count();
    (count(1, 1), count(0, 1), count(1, 0), count(0, 0))
}
