//! Regularized low-rank weight offsets for attention projections.
//!
//! Each targeted projection matrix `W0` (shape M x N) gets an offset
//! `dW` built from a learned constant `v0` and four linear maps: two project
//! `v0` to a column vector `v_y` (length M) and a row vector `v_x` (length
//! N); their outer product is then refined by a linear map over the rows and
//! one over the columns. The biased refinements can each raise the rank by at
//! most one, so `rank(dW) <= 3` always. Offsets apply multiplicatively,
//! `W = W0 * (1 + dW)`, leaving `W0` untouched.
//!
//! Two ablation variants share the same application path: a direct,
//! unregularized full-rank `dW` parameter, and a HyperNetwork head where
//! `v0` is predicted from aggregated backbone features of the concept image.

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DeltaMap};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

/// Elementwise `W0 * (1 + dW)`.
///
/// ```
/// use fewstep::offsets::modulate;
/// use candle_core::{Tensor, Device};
///
/// let w0 = Tensor::new(&[[2.0f32, -1.0], [0.5, 3.0]], &Device::Cpu)?;
/// let zero = w0.zeros_like()?;
/// // dW = 0 leaves the weight untouched.
/// assert_eq!(modulate(&w0, &zero)?.to_vec2::<f32>()?, w0.to_vec2::<f32>()?);
/// # Ok::<(), fewstep::Error>(())
/// ```
pub fn modulate(w0: &Tensor, dw: &Tensor) -> Result<Tensor> {
    if w0.dims() != dw.dims() {
        return Err(Error::contract(format!(
            "modulate shape mismatch: W0 {:?} vs dW {:?}",
            w0.dims(),
            dw.dims()
        )));
    }
    Ok(w0.mul(&dw.affine(1.0, 1.0)?)?)
}

/// How offsets are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// The regularized constant + four linear maps.
    Regularized,
    /// Ablation: a free M x N parameter per layer.
    Direct,
    /// Ablation: `v0` replaced by a projection of backbone features.
    Hyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OffsetConfig {
    /// Length K of the learned constant v0.
    pub k: usize,
    /// Share a single v0 across all layers instead of one per layer.
    pub shared_v0: bool,
    pub mode: OffsetMode,
}

impl Default for OffsetConfig {
    fn default() -> Self {
        Self {
            k: 64,
            shared_v0: false,
            mode: OffsetMode::Regularized,
        }
    }
}

/// The regularized offset parameterization for one projection matrix.
pub struct OffsetSpec {
    pub layer_id: String,
    pub m: usize,
    pub n: usize,
    v0: Tensor,
    row_proj_w: Tensor,
    row_proj_b: Tensor,
    col_proj_w: Tensor,
    col_proj_b: Tensor,
    row_refine_w: Tensor,
    row_refine_b: Tensor,
    col_refine_w: Tensor,
    col_refine_b: Tensor,
}

impl OffsetSpec {
    /// Create spec parameters under `offsets.<layer_id>.*`. When `shared_v0`
    /// is given it is used instead of a per-layer constant.
    ///
    /// Initialization recovers the base model exactly: the column-refinement
    /// map starts at zero, so `dW = 0`, while the remaining maps start
    /// non-degenerate so that gradients reach every parameter group.
    pub fn new(
        store: &mut ParamStore,
        layer_id: &str,
        m: usize,
        n: usize,
        k: usize,
        shared_v0: Option<&Tensor>,
    ) -> Result<Self> {
        let p = format!("offsets.{layer_id}");
        let v0 = match shared_v0 {
            Some(v) => v.clone(),
            None => store.param(&format!("{p}.v0"), &[k], Init::Normal { std: 0.02 })?,
        };
        let proj_std = (1.0 / k as f64).sqrt();
        Ok(Self {
            layer_id: layer_id.to_string(),
            m,
            n,
            v0,
            row_proj_w: store.param(&format!("{p}.row_proj.weight"), &[m, k], Init::Normal { std: proj_std })?,
            row_proj_b: store.param(&format!("{p}.row_proj.bias"), &[m], Init::Zeros)?,
            col_proj_w: store.param(&format!("{p}.col_proj.weight"), &[n, k], Init::Normal { std: proj_std })?,
            col_proj_b: store.param(&format!("{p}.col_proj.bias"), &[n], Init::Zeros)?,
            row_refine_w: store.param(&format!("{p}.row_refine.weight"), &[n, n], Init::Identity)?,
            row_refine_b: store.param(&format!("{p}.row_refine.bias"), &[n], Init::Zeros)?,
            col_refine_w: store.param(&format!("{p}.col_refine.weight"), &[m, m], Init::Zeros)?,
            col_refine_b: store.param(&format!("{p}.col_refine.bias"), &[m], Init::Zeros)?,
        })
    }

    /// `dW` from an explicit constant (used by the HyperNetwork variant).
    pub fn materialize_from(&self, v0: &Tensor) -> Result<Tensor> {
        if v0.dims1()? != self.v0.dims1()? {
            return Err(Error::contract(format!(
                "v0 length {} != {}",
                v0.dims1()?,
                self.v0.dims1()?
            )));
        }
        let v = v0.unsqueeze(1)?; // [K, 1]
        let v_y = self
            .row_proj_w
            .matmul(&v)?
            .squeeze(1)?
            .add(&self.row_proj_b)?; // [M]
        let v_x = self
            .col_proj_w
            .matmul(&v)?
            .squeeze(1)?
            .add(&self.col_proj_b)?; // [N]
        let outer = v_y.unsqueeze(1)?.matmul(&v_x.unsqueeze(0)?)?; // [M, N]
        // Row refinement: apply an N -> N map to every row, bias broadcast
        // over rows.
        let rowed = outer
            .matmul(&self.row_refine_w.t()?)?
            .broadcast_add(&self.row_refine_b)?;
        // Column refinement: apply an M -> M map to every column, bias
        // broadcast over columns.
        let coled = self
            .col_refine_w
            .matmul(&rowed)?
            .broadcast_add(&self.col_refine_b.unsqueeze(1)?)?;
        Ok(coled)
    }

    /// Materialize `dW` (shape [M, N], rank at most 3).
    pub fn materialize(&self) -> Result<Tensor> {
        self.materialize_from(&self.v0)
    }
}

/// HyperNetwork ablation head: the constant is predicted from aggregated
/// backbone features of the concept image.
pub struct HyperOffsetHead {
    pub spec: OffsetSpec,
    proj_w: Tensor,
    proj_b: Tensor,
}

impl HyperOffsetHead {
    pub fn new(
        store: &mut ParamStore,
        layer_id: &str,
        m: usize,
        n: usize,
        k: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        let spec = OffsetSpec::new(store, layer_id, m, n, k, None)?;
        let p = format!("offsets.{layer_id}.hyper_proj");
        let std = (1.0 / feature_dim as f64).sqrt();
        Ok(Self {
            spec,
            proj_w: store.param(&format!("{p}.weight"), &[k, feature_dim], Init::Normal { std })?,
            proj_b: store.param(&format!("{p}.bias"), &[k], Init::Zeros)?,
        })
    }

    /// `features` is the aggregated backbone feature vector of the concept
    /// image, shape [F].
    pub fn materialize(&self, features: &Tensor) -> Result<Tensor> {
        let v0 = self
            .proj_w
            .matmul(&features.unsqueeze(1)?)?
            .squeeze(1)?
            .add(&self.proj_b)?;
        self.spec.materialize_from(&v0)
    }
}

enum OffsetEntry {
    Spec(OffsetSpec),
    Direct(Tensor),
    Hyper(HyperOffsetHead),
}

/// One offset per q/k/v projection of every attention layer in the denoiser.
pub struct OffsetSet {
    pub cfg: OffsetConfig,
    entries: BTreeMap<String, OffsetEntry>,
}

impl OffsetSet {
    /// Build offsets covering exactly the denoiser's advertised attention
    /// layer ids. `feature_dim` is required in hyper mode.
    pub fn new(
        store: &mut ParamStore,
        denoiser: &Denoiser,
        cfg: &OffsetConfig,
        feature_dim: Option<usize>,
    ) -> Result<Self> {
        let shared = if cfg.shared_v0 && cfg.mode != OffsetMode::Direct {
            Some(store.param("offsets.shared.v0", &[cfg.k], Init::Normal { std: 0.02 })?)
        } else {
            None
        };
        let mut entries = BTreeMap::new();
        for layer_id in denoiser.attention_layer_ids() {
            let (m, n) = denoiser.projection_shape(&layer_id)?;
            let entry = match cfg.mode {
                OffsetMode::Regularized => OffsetEntry::Spec(OffsetSpec::new(
                    store,
                    &layer_id,
                    m,
                    n,
                    cfg.k,
                    shared.as_ref(),
                )?),
                OffsetMode::Direct => OffsetEntry::Direct(store.param(
                    &format!("offsets.{layer_id}.delta"),
                    &[m, n],
                    Init::Zeros,
                )?),
                OffsetMode::Hyper => {
                    let f = feature_dim.ok_or_else(|| {
                        Error::contract("hyper offset mode needs the backbone feature dim")
                    })?;
                    OffsetEntry::Hyper(HyperOffsetHead::new(store, &layer_id, m, n, cfg.k, f)?)
                }
            };
            entries.insert(layer_id, entry);
        }
        Ok(Self {
            cfg: cfg.clone(),
            entries,
        })
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn spec(&self, layer_id: &str) -> Option<&OffsetSpec> {
        match self.entries.get(layer_id) {
            Some(OffsetEntry::Spec(s)) => Some(s),
            Some(OffsetEntry::Hyper(h)) => Some(&h.spec),
            _ => None,
        }
    }

    /// Materialize every `dW`. In hyper mode `hyper_features` must carry the
    /// aggregated backbone features of the concept image.
    pub fn materialize_all(&self, hyper_features: Option<&Tensor>) -> Result<DeltaMap> {
        let mut map = DeltaMap::new();
        for (id, entry) in &self.entries {
            let dw = match entry {
                OffsetEntry::Spec(s) => s.materialize()?,
                OffsetEntry::Direct(dw) => dw.clone(),
                OffsetEntry::Hyper(h) => {
                    let f = hyper_features.ok_or_else(|| {
                        Error::contract("hyper offsets need backbone features to materialize")
                    })?;
                    h.materialize(f)?
                }
            };
            map.insert(id.clone(), dw);
        }
        Ok(map)
    }
}

/// A denoiser with offsets attached. Holds the materialized deltas; the base
/// weights are read-only through this view. Dropping (or `detach`) releases
/// the attachment guard.
pub struct ModulatedView<'a> {
    denoiser: &'a Denoiser,
    pub delta: DeltaMap,
}

impl<'a> ModulatedView<'a> {
    pub fn forward(&self, z: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.denoiser.forward(z, t, cond, Some(&self.delta))
    }

    pub fn detach(self) {}
}

impl Drop for ModulatedView<'_> {
    fn drop(&mut self) {
        self.denoiser.attach_guard().store(false, Ordering::SeqCst);
    }
}

/// Attach `offsets` to `denoiser`, checking that the offset keys are exactly
/// the model's attention layer ids and that no other attachment is live.
pub fn attach<'a>(
    denoiser: &'a Denoiser,
    offsets: &OffsetSet,
    hyper_features: Option<&Tensor>,
) -> Result<ModulatedView<'a>> {
    let model_ids = denoiser.attention_layer_ids();
    let offset_ids = offsets.layer_ids();
    let missing: Vec<&String> = model_ids.iter().filter(|i| !offset_ids.contains(i)).collect();
    let extra: Vec<&String> = offset_ids.iter().filter(|i| !model_ids.contains(i)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::contract(format!(
            "offset/model layer id mismatch: missing {missing:?}, extra {extra:?}"
        )));
    }
    if denoiser
        .attach_guard()
        .swap(true, Ordering::SeqCst)
    {
        return Err(Error::contract(
            "denoiser already has an offset set attached (double modulation)",
        ));
    }
    let delta = match offsets.materialize_all(hyper_features) {
        Ok(d) => d,
        Err(e) => {
            denoiser.attach_guard().store(false, Ordering::SeqCst);
            return Err(e);
        }
    };
    Ok(ModulatedView { denoiser, delta })
}
