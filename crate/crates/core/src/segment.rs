//! Label maps from condensation traces, and binary masks from label maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condense::{densify, persistent_structures, CondensationTrace, CondenseError};
use crate::imgio::{BinaryMask, LabelMap};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("no snapshot satisfies {0}")]
    SelectorUnsatisfiable(GranularitySelector),
    #[error("trace covers {points} points, image has {pixels}")]
    SizeMismatch { points: usize, pixels: usize },
    #[error("ground truth has no foreground pixel")]
    EmptyForeground,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("bad selector {0:?}: expected persistent, count:N, kN or index:N")]
    BadSelector(String),
    #[error(transparent)]
    Condense(#[from] CondenseError),
}

/// Which granularity of a condensation trace to turn into a label map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GranularitySelector {
    /// First snapshot with at most this many clusters.
    ClusterCount(usize),
    SnapshotIndex(usize),
    Persistent,
}

impl fmt::Display for GranularitySelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ClusterCount(n) => write!(f, "count:{n}"),
            Self::SnapshotIndex(i) => write!(f, "index:{i}"),
            Self::Persistent => f.write_str("persistent"),
        }
    }
}

impl FromStr for GranularitySelector {
    type Err = SegmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SegmentError::BadSelector(s.to_string());
        let s = s.trim();
        if s == "persistent" {
            return Ok(Self::Persistent);
        }
        if let Some(v) = s.strip_prefix("count:") {
            let n: usize = v.parse().map_err(|_| bad())?;
            return if n >= 1 { Ok(Self::ClusterCount(n)) } else { Err(bad()) };
        }
        if let Some(v) = s.strip_prefix("index:") {
            return v.parse().map(Self::SnapshotIndex).map_err(|_| bad());
        }
        Err(bad())
    }
}

/// Reshape one granularity of `trace` into an `height x width` map with dense labels.
pub fn label_map_at(
    trace: &CondensationTrace,
    sel: GranularitySelector,
    height: usize,
    width: usize,
) -> Result<LabelMap, SegmentError> {
    if trace.num_points != height * width {
        return Err(SegmentError::SizeMismatch { points: trace.num_points, pixels: height * width });
    }
    let labels = match sel {
        GranularitySelector::Persistent => persistent_structures(trace, 2)?,
        GranularitySelector::ClusterCount(n) => {
            let snap = trace
                .snapshots
                .iter()
                .find(|s| s.num_clusters <= n)
                .ok_or(SegmentError::SelectorUnsatisfiable(sel))?;
            densify(&snap.assignment)
        }
        GranularitySelector::SnapshotIndex(i) => {
            let snap = trace.snapshots.get(i).ok_or(SegmentError::SelectorUnsatisfiable(sel))?;
            densify(&snap.assignment)
        }
    };
    Ok(LabelMap::new(height, width, labels).expect("size checked"))
}

/// Mask of the cluster most often found under the gt foreground (ties go to
/// the smaller label).
pub fn binarize_with_hint(lm: &LabelMap, gt: &BinaryMask) -> Result<BinaryMask, SegmentError> {
    if (lm.height(), lm.width()) != (gt.height(), gt.width()) {
        return Err(SegmentError::ShapeMismatch((lm.height(), lm.width()), (gt.height(), gt.width())));
    }
    let mut tally = std::collections::BTreeMap::<u32, usize>::new();
    for (&l, &on) in lm.labels().iter().zip(gt.bits()) {
        if on {
            *tally.entry(l).or_default() += 1;
        }
    }
    let modal = tally
        .iter()
        .fold(None::<(u32, usize)>, |best, (&l, &n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((l, n)),
        })
        .ok_or(SegmentError::EmptyForeground)?
        .0;
    Ok(lm.mask_of(modal))
}
