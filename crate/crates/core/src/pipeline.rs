//! End-to-end glue: embed an image, condense, and cut label maps.

use std::fmt;
use std::str::FromStr;

use crate::condense::{condense_run, spectral_kmeans, CondensationTrace, CondenseConfig, CondenseError, PointCloud};
use crate::encoder::{self, EncoderError, EncoderParams};
use crate::imgio::{Image, LabelMap};
use crate::segment::{label_map_at, GranularitySelector, SegmentError};

/// A granularity of the condensation trace, or the k-means baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    Trace(GranularitySelector),
    KMeans(usize),
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Trace(g) => g.fmt(f),
            Self::KMeans(k) => write!(f, "k{k}"),
        }
    }
}

impl FromStr for Selector {
    type Err = SegmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if let Some(k) = t.strip_prefix('k') {
            return match k.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(Self::KMeans(k)),
                _ => Err(SegmentError::BadSelector(s.to_string())),
            };
        }
        t.parse().map(Self::Trace)
    }
}

pub fn parse_selectors(list: &str) -> Result<Vec<Selector>, SegmentError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Condense(#[from] CondenseError),
}

/// Per-pixel embeddings as a point cloud in row-major pixel order.
pub fn embed(params: &EncoderParams, img: &Image) -> Result<PointCloud, PipelineError> {
    let field = encoder::forward(params, img)?;
    Ok(PointCloud::from_field(&field, false)?)
}

/// Condensation trace over unit-normalized embeddings (partial when the
/// iteration budget ran out) plus one result per selector.
pub struct Segmentation {
    pub trace: Option<CondensationTrace>,
    pub converged: bool,
    pub maps: Vec<(Selector, Result<LabelMap, SegmentError>)>,
}

pub fn segment_image(
    params: &EncoderParams,
    img: &Image,
    selectors: &[Selector],
    condense: &CondenseConfig,
    seed: u64,
) -> Result<Segmentation, PipelineError> {
    let cloud = embed(params, img)?;
    let needs_trace = selectors.iter().any(|s| matches!(s, Selector::Trace(_)));
    let (trace, converged) = if needs_trace {
        match condense_run(&cloud.normalized(), condense) {
            Ok(t) => (Some(t), true),
            Err(CondenseError::DidNotConverge(t)) => (Some(*t), false),
            Err(e) => return Err(e.into()),
        }
    } else {
        (None, false)
    };
    let (h, w) = (img.height(), img.width());
    let maps = selectors
        .iter()
        .map(|&sel| {
            let map = match sel {
                Selector::Trace(g) => label_map_at(trace.as_ref().expect("trace computed"), g, h, w),
                Selector::KMeans(k) => spectral_kmeans(&cloud, k, seed)
                    .map_err(SegmentError::from)
                    .map(|l| LabelMap::new(h, w, l).expect("one label per pixel")),
            };
            (sel, map)
        })
        .collect();
    Ok(Segmentation { trace, converged, maps })
}
