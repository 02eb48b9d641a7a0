use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_CLIP_LEN: usize = 16;

/// `len` consecutive frames of one video starting at `start`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipWindow {
    pub video_id: String,
    pub start: usize,
    pub len: usize,
}

impl ClipWindow {
    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Sliding windows over a video and, per frame, the clips that contain it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipSet {
    pub clips: Vec<ClipWindow>,
    pub membership: Vec<Vec<usize>>,
}

pub fn make_clips(video_id: &str, frame_count: usize, window: usize, stride: usize) -> Result<ClipSet> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("clip window and stride must be positive"));
    }
    if frame_count < window {
        return Err(Error::invalid(format!(
            "video {video_id} has {frame_count} frames, fewer than the clip length {window}"
        )));
    }
    let mut starts: Vec<usize> = (0..=frame_count - window).step_by(stride).collect();
    // keep the tail covered when the stride skips past it
    if *starts.last().unwrap() + window < frame_count {
        starts.push(frame_count - window);
    }
    let clips: Vec<ClipWindow> = starts
        .into_iter()
        .map(|start| ClipWindow {
            video_id: video_id.to_string(),
            start,
            len: window,
        })
        .collect();
    let mut membership = vec![Vec::new(); frame_count];
    for (k, c) in clips.iter().enumerate() {
        for f in c.frames() {
            membership[f].push(k);
        }
    }
    Ok(ClipSet { clips, membership })
}

/// Absolute difference of every frame from the per-pixel median frame.
pub fn subtract_median_background(frames: &[Tensor]) -> Result<Vec<Tensor>> {
    let first = frames.first().ok_or(Error::Empty("video frames"))?;
    if frames.iter().any(|f| f.shape() != first.shape()) {
        return Err(Error::shape("background", "frames differ in shape"));
    }
    let n = first.numel();
    let mut median = vec![0.0f32; n];
    let mut column = vec![0.0f32; frames.len()];
    for (i, m) in median.iter_mut().enumerate() {
        for (c, f) in column.iter_mut().zip(frames) {
            *c = f.data()[i];
        }
        column.sort_by(f32::total_cmp);
        let k = column.len();
        *m = if k % 2 == 1 {
            column[k / 2]
        } else {
            0.5 * (column[k / 2 - 1] + column[k / 2])
        };
    }
    Ok(frames
        .iter()
        .map(|f| {
            let d = f.data().iter().zip(&median).map(|(a, b)| (a - b).abs()).collect();
            Tensor::from_parts(f.shape().to_vec(), d)
        })
        .collect())
}
