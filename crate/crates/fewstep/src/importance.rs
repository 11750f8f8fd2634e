//! Checkpoint layer-importance analysis.
//!
//! Compares a base checkpoint against one or more fine-tuned checkpoints.
//! Each named layer (a weight matrix together with its bias, if any) gets
//! the score mean(|tuned - base|) / mean(|base|), averaged across tuned
//! checkpoints, then ranked and grouped by attention kind, U-Net depth and
//! projection-matrix type. The denominator uses the base model's absolute
//! values; layers whose base magnitude is below 1e-12 are reported as
//! undefined rather than divided by zero.

use std::collections::{BTreeMap, HashMap};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base magnitudes below this make the score undefined.
pub const DEGENERATE_BASE: f64 = 1e-12;

pub type TensorMap = HashMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer_id: String,
    /// None means undefined (degenerate base magnitude).
    pub score: Option<f64>,
    pub n_params: usize,
}

/// Map a tensor name to its layer id: the trailing ".weight"/".bias"
/// segment is stripped, everything else is its own layer.
pub fn layer_id_of(tensor_name: &str) -> &str {
    tensor_name
        .strip_suffix(".weight")
        .or_else(|| tensor_name.strip_suffix(".bias"))
        .unwrap_or(tensor_name)
}

/// All layer ids present in a tensor map, sorted.
pub fn layer_ids(map: &TensorMap) -> Vec<String> {
    let mut ids: Vec<String> = map.keys().map(|k| layer_id_of(k).to_string()).collect();
    ids.sort();
    ids.dedup();
    ids
}

fn abs_sum_count(t: &Tensor) -> Result<(f64, usize)> {
    let v = t
        .to_dtype(candle_core::DType::F64)?
        .abs()?
        .sum_all()?
        .to_scalar::<f64>()?;
    Ok((v, t.elem_count()))
}

/// Importance of one layer: mean absolute parameter change, normalized by
/// the layer's mean absolute base value. Biases are scored together with
/// their weights.
pub fn layer_score(base: &TensorMap, tuned: &TensorMap, layer_id: &str) -> Result<LayerScore> {
    let mut diff_sum = 0.0;
    let mut base_sum = 0.0;
    let mut n = 0usize;
    for (name, b) in base {
        if layer_id_of(name) != layer_id {
            continue;
        }
        let t = tuned.get(name).ok_or_else(|| {
            Error::contract(format!("layer {layer_id}: tensor {name} missing from tuned map"))
        })?;
        if t.dims() != b.dims() {
            return Err(Error::contract(format!(
                "layer {layer_id}: tensor {name} shape {:?} vs base {:?}",
                t.dims(),
                b.dims()
            )));
        }
        let delta = t
            .to_dtype(candle_core::DType::F64)?
            .sub(&b.to_dtype(candle_core::DType::F64)?)?;
        let (ds, cnt) = abs_sum_count(&delta)?;
        let (bs, _) = abs_sum_count(b)?;
        diff_sum += ds;
        base_sum += bs;
        n += cnt;
    }
    if n == 0 {
        return Err(Error::contract(format!("layer {layer_id} not found in base map")));
    }
    let mean_diff = diff_sum / n as f64;
    let mean_base = base_sum / n as f64;
    let score = if mean_base < DEGENERATE_BASE {
        None
    } else {
        Some(mean_diff / mean_base)
    };
    Ok(LayerScore {
        layer_id: layer_id.to_string(),
        score,
        n_params: n,
    })
}

/// Location of a layer within the network.
fn location_group(layer_id: &str) -> &'static str {
    if layer_id.contains(".cross.") {
        "cross_attention"
    } else if layer_id.contains(".self.") {
        "self_attention"
    } else {
        "other"
    }
}

fn depth_group(layer_id: &str) -> &'static str {
    if layer_id.starts_with("denoiser.down.") {
        "down"
    } else if layer_id.starts_with("denoiser.mid.") {
        "mid"
    } else if layer_id.starts_with("denoiser.up.") {
        "up"
    } else {
        "other"
    }
}

/// Projection-matrix type for attention layers, if any.
fn matrix_type(layer_id: &str) -> Option<&'static str> {
    if !layer_id.contains(".cross.") && !layer_id.contains(".self.") {
        return None;
    }
    if layer_id.ends_with(".q") {
        Some("W_Q")
    } else if layer_id.ends_with(".k") {
        Some("W_K")
    } else if layer_id.ends_with(".v") {
        Some("W_V")
    } else if layer_id.ends_with(".out") {
        Some("W_O")
    } else {
        None
    }
}

fn mean_defined(scores: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = scores.iter().filter_map(|s| *s).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// Per-layer scores, averaged across tuned checkpoints, sorted by id.
    pub layers: Vec<LayerScore>,
    /// Layer ids ranked by descending score, ties and undefined entries in
    /// lexicographic order (undefined last).
    pub ranking: Vec<String>,
    /// Mean score per attention location: cross_attention / self_attention /
    /// other.
    pub location_groups: BTreeMap<String, Option<f64>>,
    /// Mean score per U-Net depth: down / mid / up / other.
    pub depth_groups: BTreeMap<String, Option<f64>>,
    /// Mean score per (attention kind, projection type), keyed
    /// "cross_attention/W_Q" etc.
    pub matrix_groups: BTreeMap<String, Option<f64>>,
}

fn check_structure(base: &TensorMap, label: &str, tuned: &TensorMap) -> Result<()> {
    for (name, b) in base {
        match tuned.get(name) {
            None => {
                return Err(Error::contract(format!(
                    "checkpoint {label}: missing tensor {name}"
                )))
            }
            Some(t) if t.dims() != b.dims() => {
                return Err(Error::contract(format!(
                    "checkpoint {label}: tensor {name} shape {:?} vs base {:?}",
                    t.dims(),
                    b.dims()
                )))
            }
            _ => {}
        }
    }
    for name in tuned.keys() {
        if !base.contains_key(name) {
            return Err(Error::contract(format!(
                "checkpoint {label}: extra tensor {name}"
            )));
        }
    }
    Ok(())
}

/// Scores averaged over a set of labelled tuned checkpoints, plus rankings
/// and group tables.
pub fn aggregate(base: &TensorMap, tuned_set: &[(String, TensorMap)]) -> Result<ImportanceReport> {
    if tuned_set.is_empty() {
        return Err(Error::contract("need at least one tuned checkpoint"));
    }
    for (label, tuned) in tuned_set {
        check_structure(base, label, tuned)?;
    }
    let ids = layer_ids(base);
    let mut layers = Vec::with_capacity(ids.len());
    for id in &ids {
        let mut per_model = Vec::with_capacity(tuned_set.len());
        let mut n_params = 0;
        for (_, tuned) in tuned_set {
            let s = layer_score(base, tuned, id)?;
            n_params = s.n_params;
            per_model.push(s.score);
        }
        layers.push(LayerScore {
            layer_id: id.clone(),
            score: mean_defined(&per_model),
            n_params,
        });
    }
    let ranking = rank_layers(&layers);
    let mut by_location: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    let mut by_depth: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    let mut by_matrix: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for l in &layers {
        by_location
            .entry(location_group(&l.layer_id).to_string())
            .or_default()
            .push(l.score);
        by_depth
            .entry(depth_group(&l.layer_id).to_string())
            .or_default()
            .push(l.score);
        if let Some(mt) = matrix_type(&l.layer_id) {
            by_matrix
                .entry(format!("{}/{}", location_group(&l.layer_id), mt))
                .or_default()
                .push(l.score);
        }
    }
    let fold = |m: BTreeMap<String, Vec<Option<f64>>>| {
        m.into_iter()
            .map(|(k, v)| (k, mean_defined(&v)))
            .collect::<BTreeMap<_, _>>()
    };
    Ok(ImportanceReport {
        layers,
        ranking,
        location_groups: fold(by_location),
        depth_groups: fold(by_depth),
        matrix_groups: fold(by_matrix),
    })
}

/// Descending by score; ties broken lexicographically; undefined scores
/// last, also lexicographic. Stable under input permutation.
pub fn rank_layers(layers: &[LayerScore]) -> Vec<String> {
    let mut sorted: Vec<&LayerScore> = layers.iter().collect();
    sorted.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => y
            .partial_cmp(&x)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.layer_id.cmp(&b.layer_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.layer_id.cmp(&b.layer_id),
    });
    sorted.into_iter().map(|l| l.layer_id.clone()).collect()
}

/// Per-layer scores as CSV (layer_id, score, n_params); undefined scores
/// written as "undefined".
pub fn scores_csv(report: &ImportanceReport) -> String {
    let mut out = String::from("layer_id,score,n_params\n");
    for l in &report.layers {
        let s = match l.score {
            Some(v) => v.to_string(),
            None => "undefined".to_string(),
        };
        out.push_str(&format!("{},{},{}\n", l.layer_id, s, l.n_params));
    }
    out
}
