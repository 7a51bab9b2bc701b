//! Dual-stream alarm pipeline.
//!
//! Frames from the outward (pedestrian) and driver (eye) streams are
//! acquired in alternating slots so only one inference runs at a time. Each
//! new score is multiplied with the most recent score of the other stream;
//! an alarm is raised when the product exceeds the threshold.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{has_image_extension, list_images};
use crate::detector::{detect, frame_score, BBox, DetectParams};
use crate::error::{Error, Result};
use crate::image::{crop, decode_image, resize_bilinear};
use crate::model::{ModelWeights, EYE, NEGATIVE, PEDESTRIAN};
use crate::tensor::Tensor;

pub const DEFAULT_FPS: f64 = 30.0;
pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const DEFAULT_DT: f64 = 1.0 / 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Outward,
    Driver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEvent {
    pub stream: StreamKind,
    /// Capture time in seconds.
    pub timestamp: f64,
    pub frame: Tensor,
    /// Position of the source file in its directory listing.
    pub sequence: u64,
    pub source: PathBuf,
}

/// Replays a directory of images as a frame stream: file `k` in
/// lexicographic order is stamped `k / fps`. Undecodable files are skipped
/// with a warning but keep their slot in the timeline.
pub fn stream_from_dir(dir: &Path, stream: StreamKind, fps: f64) -> Result<Vec<FrameEvent>> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::Argument(format!("fps must be positive, got {fps}")));
    }
    let mut events = Vec::new();
    for (k, path) in list_images(dir)?.into_iter().enumerate() {
        debug_assert!(has_image_extension(&path));
        let decoded = fs::read(&path).map_err(|e| Error::io(&path, e)).and_then(|b| decode_image(&b));
        match decoded {
            Ok(frame) => events.push(FrameEvent {
                stream,
                timestamp: k as f64 / fps,
                frame,
                sequence: k as u64,
                source: path,
            }),
            Err(e) => eprintln!("warning: skipping frame {}: {e}", path.display()),
        }
    }
    Ok(events)
}

/// One acquisition slot of the staggered schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub stream: StreamKind,
    /// Index into that stream's frame list.
    pub index: usize,
    pub scheduled_time: f64,
}

/// Index of the remaining frame nearest to `target`; earlier frame on ties.
fn nearest_from(times: &[f64], start: usize, target: f64) -> usize {
    let mut best = start;
    for (i, &t) in times.iter().enumerate().skip(start + 1) {
        if (t - target).abs() < (times[best] - target).abs() {
            best = i;
        } else if t > target {
            break;
        }
    }
    best
}

/// Interleaves two streams on a fixed cadence: outward slot `k` is at
/// `2k * dt`, driver slot `k` at `(2k + 1) * dt`. Each slot takes the
/// stream's unused frame nearest to the slot time, and frames are used at
/// most once. Once a stream runs out the other continues alone on its own
/// slots, so scheduled times never coincide.
///
/// `outward` and `driver` are capture timestamps in increasing order.
pub fn staggered_schedule(outward: &[f64], driver: &[f64], dt: f64) -> Result<Vec<Slot>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Argument(format!("dt must be positive, got {dt}")));
    }
    let mut slots = Vec::with_capacity(outward.len() + driver.len());
    let mut cursors = [0usize, 0usize];
    let streams = [(StreamKind::Outward, outward), (StreamKind::Driver, driver)];
    let mut slot_index: u64 = 0;
    while cursors[0] < outward.len() || cursors[1] < driver.len() {
        for (s, &(kind, times)) in streams.iter().enumerate() {
            let scheduled_time = slot_index as f64 * dt;
            slot_index += 1;
            if cursors[s] >= times.len() {
                continue;
            }
            let index = nearest_from(times, cursors[s], scheduled_time);
            cursors[s] = index + 1;
            slots.push(Slot { stream: kind, index, scheduled_time });
        }
    }
    Ok(slots)
}

/// Where the eye region sits in driver frames.
#[derive(Debug, Clone, PartialEq)]
pub enum RoiConfig {
    FixedRect(BBox),
    /// Per-frame rectangles keyed by frame sequence number.
    Annotations(HashMap<u64, BBox>),
}

impl RoiConfig {
    /// Reads `sequence,x,y,w,h` lines; blank lines and `#` comments are
    /// ignored.
    pub fn from_annotation_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Config(format!("{}:{}: expected `sequence,x,y,w,h`", path.display(), n + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [seq, x, y, w, h] = fields[..] else {
                return Err(bad());
            };
            let seq: u64 = seq.parse().map_err(|_| bad())?;
            let nums: Vec<f64> = [x, y, w, h]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let rect = BBox::new(nums[0], nums[1], nums[2], nums[3]);
            if !rect.is_valid() {
                return Err(bad());
            }
            map.insert(seq, rect);
        }
        Ok(RoiConfig::Annotations(map))
    }

    pub fn rect_for(&self, sequence: u64) -> Result<BBox> {
        match self {
            RoiConfig::FixedRect(r) => Ok(*r),
            RoiConfig::Annotations(map) => map
                .get(&sequence)
                .copied()
                .ok_or_else(|| Error::Roi(format!("no eye annotation for frame {sequence}"))),
        }
    }
}

/// Crops the rectangle (rounded to whole pixels) and resizes it to
/// `size = (height, width)`.
pub fn extract_roi(frame: &Tensor, rect: &BBox, size: (usize, usize)) -> Result<Tensor> {
    let (_, fh, fw) = frame.chw()?;
    let [x, y, w, h] = [rect.x, rect.y, rect.w, rect.h].map(f64::round);
    if !rect.is_valid() || x < 0.0 || y < 0.0 || w < 1.0 || h < 1.0 || x + w > fw as f64 || y + h > fh as f64 {
        return Err(Error::Roi(format!(
            "rect ({}, {}, {}, {}) outside {fw}x{fh} frame",
            rect.x, rect.y, rect.w, rect.h
        )));
    }
    let patch = crop(frame, x as usize, y as usize, w as usize, h as usize)?;
    resize_bilinear(&patch, size.0, size.1)
}

/// Eye crop for frame `sequence`, sized for the eye network (24x24).
pub fn extract_eye_roi(frame: &Tensor, sequence: u64, config: &RoiConfig) -> Result<Tensor> {
    let [_, h, w] = crate::model::build_eye_net().input_shape();
    extract_roi(frame, &config.rect_for(sequence)?, (h, w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fusion {
    pub product: f64,
    pub alarm: bool,
}

/// Multiplies the two scores; the alarm fires only when the product is
/// strictly greater than `threshold`.
pub fn fuse(pedestrian_score: f64, drowsiness_score: f64, threshold: f64) -> Result<Fusion> {
    for (name, v) in [("pedestrian", pedestrian_score), ("drowsiness", drowsiness_score)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("{name} score {v} outside [0, 1]")));
        }
    }
    let product = pedestrian_score * drowsiness_score;
    Ok(Fusion {
        product,
        alarm: product > threshold,
    })
}

/// One fusion evaluation, written to the event log as a JSON line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlarmEvent {
    #[serde(rename = "t")]
    pub timestamp: f64,
    #[serde(rename = "ped")]
    pub pedestrian_score: f64,
    #[serde(rename = "drowsy")]
    pub drowsiness_score: f64,
    pub product: f64,
    pub alarm: bool,
}

impl AlarmEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("alarm event serialises")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub threshold: f64,
    pub dt: f64,
    pub fps: f64,
    pub detect: DetectParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            threshold: DEFAULT_THRESHOLD,
            dt: DEFAULT_DT,
            fps: DEFAULT_FPS,
            detect: DetectParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub events: Vec<AlarmEvent>,
    /// Driver frames dropped because the eye ROI could not be extracted.
    pub roi_failures: Vec<(u64, String)>,
}

fn check_models(ped: &ModelWeights, eye: &ModelWeights, config: &PipelineConfig) -> Result<()> {
    let as_config = |e: Error| Error::Config(e.to_string());
    ped.expect_model(PEDESTRIAN).map_err(as_config)?;
    eye.expect_model(EYE).map_err(as_config)?;
    if !(config.dt > 0.0 && config.dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {}", config.dt)));
    }
    if !config.threshold.is_finite() {
        return Err(Error::Config("threshold must be finite".into()));
    }
    Ok(())
}

/// Runs the staggered pipeline over already-decoded frame streams.
///
/// Outward frames produce the best detection score (0 when nothing is
/// detected); driver frames produce the closed-eye probability. Until a
/// stream has produced its first score its held value is 0, so no alarm can
/// fire before both cameras have been read.
pub fn run_pipeline(
    ped: &ModelWeights,
    eye: &ModelWeights,
    outward: &[FrameEvent],
    driver: &[FrameEvent],
    roi: &RoiConfig,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    check_models(ped, eye, config)?;
    let times = |s: &[FrameEvent]| s.iter().map(|f| f.timestamp).collect::<Vec<_>>();
    let schedule = staggered_schedule(&times(outward), &times(driver), config.dt)?;
    let mut out = PipelineOutput::default();
    let (mut held_ped, mut held_drowsy) = (0.0, 0.0);
    for slot in schedule {
        match slot.stream {
            StreamKind::Outward => {
                let detections = detect(ped, &outward[slot.index].frame, &config.detect)?;
                held_ped = frame_score(&detections);
            }
            StreamKind::Driver => {
                let frame = &driver[slot.index];
                match extract_eye_roi(&frame.frame, frame.sequence, roi) {
                    Ok(crop) => held_drowsy = eye.predict(&crop)?.data()[NEGATIVE],
                    Err(e @ Error::Roi(_)) => {
                        eprintln!("warning: skipping driver frame {}: {e}", frame.sequence);
                        out.roi_failures.push((frame.sequence, e.to_string()));
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let fusion = fuse(held_ped, held_drowsy, config.threshold)?;
        out.events.push(AlarmEvent {
            timestamp: slot.scheduled_time,
            pedestrian_score: held_ped,
            drowsiness_score: held_drowsy,
            product: fusion.product,
            alarm: fusion.alarm,
        });
    }
    Ok(out)
}

/// Validates the models, then replays both directories through
/// [`run_pipeline`].
pub fn run_pipeline_dirs(
    ped: &ModelWeights,
    eye: &ModelWeights,
    outward_dir: &Path,
    driver_dir: &Path,
    roi: &RoiConfig,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    check_models(ped, eye, config)?;
    let outward = stream_from_dir(outward_dir, StreamKind::Outward, config.fps)?;
    let driver = stream_from_dir(driver_dir, StreamKind::Driver, config.fps)?;
    run_pipeline(ped, eye, &outward, &driver, roi, config)
}
