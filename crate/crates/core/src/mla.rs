//! Single-device latent attention: the reference pipeline everything else is
//! measured against.
//!
//! Instead of caching per-head keys and values, each token stores one
//! compressed latent vector (`latent_dim` wide, kept *pre*-normalization)
//! plus one shared rotary key (`rope_dim` wide). Keys and values are
//! re-expanded from the normalized latent on demand during prefill; during
//! decode the expansions are folded into the query and output projections
//! ("weight absorption") so attention runs directly in latent space:
//!
//! - per head `i`, the key expansion folds into the query:
//!   `Q_i = q_i * k_up_i^T`, so the non-positional logit is `Q_i . c_hat`;
//! - the value expansion pairs with the output projection:
//!   `latent_to_out_i = v_up_i * out_proj_i`, so the head output is
//!   `(probs . c_hat) * latent_to_out_i`.
//!
//! Positional information travels on a decoupled rotary path: a per-head
//! rotary query and a single shared rotary key, appended to the logit before
//! the common `1/sqrt(head_dim + rope_dim)` scaling.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, sqnorm};
use crate::numerics::{rmsnorm, rope_apply, softmax_in_place};
use crate::{Matrix, SeededRng};

/// Full unabsorbed weight set of one latent-attention layer.
///
/// All projections are stored input-rows x output-cols and applied by right
/// multiplication (`y = x * W`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    /// Token -> KV latent down-projection, `hidden_dim x latent_dim`.
    pub kv_down: Matrix,
    /// Token -> shared rotary key, `hidden_dim x rope_dim`.
    pub k_rope: Matrix,
    /// Token -> query latent down-projection, `hidden_dim x q_rank`.
    pub q_down: Matrix,
    /// Query latent -> per-head queries, `q_rank x num_heads*head_dim`.
    pub q_up: Matrix,
    /// Query latent -> per-head rotary queries, `q_rank x num_heads*rope_dim`.
    pub q_rope: Matrix,
    /// KV latent -> per-head keys, `latent_dim x num_heads*head_dim`.
    pub k_up: Matrix,
    /// KV latent -> per-head values, `latent_dim x num_heads*head_dim`.
    pub v_up: Matrix,
    /// Concatenated head outputs -> model width, `num_heads*head_dim x hidden_dim`.
    pub out_proj: Matrix,
    /// RMS normalization gain over the latent, length `latent_dim`.
    pub norm_gamma: Vec<f64>,
}

impl WeightSet {
    /// Checks every projection against the configured dimensions.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let checks: [(&str, &Matrix, usize, usize); 8] = [
            ("kv_down", &self.kv_down, cfg.hidden_dim, cfg.latent_dim),
            ("k_rope", &self.k_rope, cfg.hidden_dim, cfg.rope_dim),
            ("q_down", &self.q_down, cfg.hidden_dim, cfg.q_rank),
            ("q_up", &self.q_up, cfg.q_rank, cfg.num_heads * cfg.head_dim),
            ("q_rope", &self.q_rope, cfg.q_rank, cfg.num_heads * cfg.rope_dim),
            ("k_up", &self.k_up, cfg.latent_dim, cfg.num_heads * cfg.head_dim),
            ("v_up", &self.v_up, cfg.latent_dim, cfg.num_heads * cfg.head_dim),
            ("out_proj", &self.out_proj, cfg.num_heads * cfg.head_dim, cfg.hidden_dim),
        ];
        for (name, m, rows, cols) in checks {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::shape(
                    "WeightSet::validate",
                    format!(
                        "{name} is {}x{}, expected {rows}x{cols}",
                        m.rows(),
                        m.cols()
                    ),
                ));
            }
        }
        if self.norm_gamma.len() != cfg.latent_dim {
            return Err(Error::shape(
                "WeightSet::validate",
                format!(
                    "norm_gamma has {} entries, expected {}",
                    self.norm_gamma.len(),
                    cfg.latent_dim
                ),
            ));
        }
        Ok(())
    }

    /// Replaces the unit normalization gain with values drawn uniformly from
    /// `[1 - amplitude, 1 + amplitude]`. Useful for testing that gain
    /// absorption actually matters.
    pub fn perturb_gamma(&mut self, rng: &mut SeededRng, amplitude: f64) {
        for g in &mut self.norm_gamma {
            *g = 1.0 + amplitude * (2.0 * rng.next_f64() - 1.0);
        }
    }
}

/// Decode-time weights with the latent expansions folded away.
#[derive(Debug, Clone)]
pub struct AbsorbedWeights {
    /// Per head: `k_up_i^T`, mapping a head query into latent space,
    /// `head_dim x latent_dim`.
    pub q_to_latent: Vec<Matrix>,
    /// Per head: `v_up_i * out_proj_i`, mapping an attended latent straight
    /// to the model width, `latent_dim x hidden_dim`.
    pub latent_to_out: Vec<Matrix>,
}

/// Per-token decode cache: pre-normalization latents, shared rotary keys,
/// and the positions they were written at.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCache {
    latents: Matrix,
    rope_keys: Matrix,
    positions: Vec<usize>,
}

impl LatentCache {
    /// Empty cache for the given geometry.
    pub fn empty(cfg: &ModelConfig) -> Self {
        LatentCache {
            latents: Matrix::zeros(0, cfg.latent_dim),
            rope_keys: Matrix::zeros(0, cfg.rope_dim),
            positions: Vec::new(),
        }
    }

    /// Builds a cache from already-stacked rows.
    pub fn from_parts(latents: Matrix, rope_keys: Matrix, positions: Vec<usize>) -> Result<Self> {
        if latents.rows() != rope_keys.rows() || latents.rows() != positions.len() {
            return Err(Error::shape(
                "LatentCache::from_parts",
                format!(
                    "{} latent rows, {} rotary rows, {} positions",
                    latents.rows(),
                    rope_keys.rows(),
                    positions.len()
                ),
            ));
        }
        Ok(LatentCache {
            latents,
            rope_keys,
            positions,
        })
    }

    /// Number of cached tokens.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Pre-normalization latent rows, one per token.
    pub fn latents(&self) -> &Matrix {
        &self.latents
    }

    /// Encoded rotary key rows, one per token.
    pub fn rope_keys(&self) -> &Matrix {
        &self.rope_keys
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Position the next appended token will take.
    pub fn next_position(&self) -> usize {
        self.positions.last().map_or(0, |p| p + 1)
    }

    /// Appends one token's latent and rotary key.
    pub fn append(&mut self, latent: &[f64], rope_key: &[f64], position: usize) -> Result<()> {
        self.latents.push_row(latent)?;
        self.rope_keys.push_row(rope_key)?;
        self.positions.push(position);
        Ok(())
    }
}

/// Draws a fresh weight set with `N(0, (scale/sqrt(fan_in))^2)` entries per
/// projection, where `fan_in` is the projection's input width. The
/// normalization gain starts at all ones.
pub fn init_weights(cfg: &ModelConfig, rng: &mut SeededRng, scale: f64) -> Result<WeightSet> {
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::arg(
            "init_weights",
            format!("scale must be positive, got {scale}"),
        ));
    }
    cfg.validate()?;
    let mut draw = |rows: usize, cols: usize| -> Matrix {
        let std = scale / (rows as f64).sqrt();
        rng.gaussian_matrix(rows, cols, std)
    };
    let w = WeightSet {
        kv_down: draw(cfg.hidden_dim, cfg.latent_dim),
        k_rope: draw(cfg.hidden_dim, cfg.rope_dim),
        q_down: draw(cfg.hidden_dim, cfg.q_rank),
        q_up: draw(cfg.q_rank, cfg.num_heads * cfg.head_dim),
        q_rope: draw(cfg.q_rank, cfg.num_heads * cfg.rope_dim),
        k_up: draw(cfg.latent_dim, cfg.num_heads * cfg.head_dim),
        v_up: draw(cfg.latent_dim, cfg.num_heads * cfg.head_dim),
        out_proj: draw(cfg.num_heads * cfg.head_dim, cfg.hidden_dim),
        norm_gamma: vec![1.0; cfg.latent_dim],
    };
    debug_assert!(w.kv_down.all_finite());
    Ok(w)
}

/// Folds the RMS gain into the latent expansions.
///
/// Normalizing with gain `gamma` and then expanding is the same as
/// normalizing with unit gain and expanding through gain-scaled rows:
/// `(gamma . c_hat) * k_up == c_hat * (diag(gamma) * k_up)`. The returned
/// set has `k_up`/`v_up` rows scaled by `gamma` and the gain reset to ones,
/// and computes identical outputs. Orthogonal latent transforms require this
/// first: they mix latent coordinates, so a non-uniform gain would no longer
/// commute past them.
pub fn absorb_gamma(cfg: &ModelConfig, w: &WeightSet) -> Result<WeightSet> {
    w.validate(cfg)?;
    let mut out = w.clone();
    for (j, &g) in w.norm_gamma.iter().enumerate() {
        let ku = out.k_up.row_mut(j);
        for v in ku.iter_mut() {
            *v *= g;
        }
        let vu = out.v_up.row_mut(j);
        for v in vu.iter_mut() {
            *v *= g;
        }
    }
    out.norm_gamma = vec![1.0; cfg.latent_dim];
    Ok(out)
}

/// Precomputes the decode-time absorbed weights for every head.
pub fn absorb(cfg: &ModelConfig, w: &WeightSet) -> Result<AbsorbedWeights> {
    w.validate(cfg)?;
    let dh = cfg.head_dim;
    let mut q_to_latent = Vec::with_capacity(cfg.num_heads);
    let mut latent_to_out = Vec::with_capacity(cfg.num_heads);
    for i in 0..cfg.num_heads {
        let k_up_i = w.k_up.slice_cols(i * dh, (i + 1) * dh)?;
        q_to_latent.push(k_up_i.transpose());
        let v_up_i = w.v_up.slice_cols(i * dh, (i + 1) * dh)?;
        let out_i = w.out_proj.slice_rows(i * dh, (i + 1) * dh)?;
        latent_to_out.push(v_up_i.matmul(&out_i)?);
    }
    Ok(AbsorbedWeights {
        q_to_latent,
        latent_to_out,
    })
}

/// Per-head causally masked attention probabilities for a prefill input.
///
/// Diagnostic companion to [`mla_prefill`]; row `t` of head `i` holds the
/// weights token `t` puts on tokens `0..=t` (later columns are exactly
/// zero). Every row sums to one.
pub fn mla_prefill_probs(cfg: &ModelConfig, w: &WeightSet, x: &Matrix) -> Result<Vec<Matrix>> {
    let parts = prefill_parts(cfg, w, x)?;
    Ok(parts.probs)
}

/// Runs the full unabsorbed pipeline over a prompt.
///
/// Returns the `[len x hidden_dim]` outputs and the populated latent cache
/// (pre-normalization latents, encoded rotary keys, positions `0..len`).
pub fn mla_prefill(cfg: &ModelConfig, w: &WeightSet, x: &Matrix) -> Result<(Matrix, LatentCache)> {
    let parts = prefill_parts(cfg, w, x)?;
    let mut head_outs = Vec::with_capacity(cfg.num_heads);
    for i in 0..cfg.num_heads {
        head_outs.push(parts.probs[i].matmul(&parts.values[i])?);
    }
    let refs: Vec<&Matrix> = head_outs.iter().collect();
    let concat = Matrix::concat_cols(&refs)?;
    let out = concat.matmul(&w.out_proj)?;
    let cache = LatentCache::from_parts(parts.latents, parts.rope_keys, parts.positions)?;
    Ok((out, cache))
}

struct PrefillParts {
    probs: Vec<Matrix>,
    values: Vec<Matrix>,
    latents: Matrix,
    rope_keys: Matrix,
    positions: Vec<usize>,
}

fn prefill_parts(cfg: &ModelConfig, w: &WeightSet, x: &Matrix) -> Result<PrefillParts> {
    w.validate(cfg)?;
    if x.cols() != cfg.hidden_dim {
        return Err(Error::shape(
            "mla_prefill",
            format!("input width {} vs hidden_dim {}", x.cols(), cfg.hidden_dim),
        ));
    }
    if x.rows() == 0 {
        return Err(Error::arg("mla_prefill", "empty prompt".to_string()));
    }
    let len = x.rows();
    let positions: Vec<usize> = (0..len).collect();
    let dh = cfg.head_dim;
    let dr = cfg.rope_dim;

    let latents = x.matmul(&w.kv_down)?;
    let c_hat = rmsnorm(&w.norm_gamma, &latents, cfg.eps)?;
    let keys = c_hat.matmul(&w.k_up)?;
    let values = c_hat.matmul(&w.v_up)?;
    let rope_keys = rope_apply(&x.matmul(&w.k_rope)?, &positions)?;

    let c_q = x.matmul(&w.q_down)?;
    let queries = c_q.matmul(&w.q_up)?;
    let rope_queries = c_q.matmul(&w.q_rope)?;

    let scale = cfg.logit_scale();
    let mut probs = Vec::with_capacity(cfg.num_heads);
    let mut value_heads = Vec::with_capacity(cfg.num_heads);
    for i in 0..cfg.num_heads {
        let q_i = queries.slice_cols(i * dh, (i + 1) * dh)?;
        let k_i = keys.slice_cols(i * dh, (i + 1) * dh)?;
        let v_i = values.slice_cols(i * dh, (i + 1) * dh)?;
        let q_pe_i = rope_apply(&rope_queries.slice_cols(i * dr, (i + 1) * dr)?, &positions)?;

        let mut logits = q_i.matmul_transpose_b(&k_i)?;
        let rope_logits = q_pe_i.matmul_transpose_b(&rope_keys)?;
        for t in 0..len {
            let row = logits.row_mut(t);
            let rope_row = rope_logits.row(t);
            for s in 0..len {
                if s > t {
                    row[s] = f64::NEG_INFINITY; // causal mask
                } else {
                    row[s] = (row[s] + rope_row[s]) * scale;
                }
            }
            softmax_in_place(row);
        }
        probs.push(logits);
        value_heads.push(v_i);
    }
    Ok(PrefillParts {
        probs,
        values: value_heads,
        latents,
        rope_keys,
        positions,
    })
}

/// One absorbed decode step.
///
/// Appends the new token to the cache, then attends over all cached tokens
/// (including the new one) entirely in latent space. Returns the
/// `[1 x hidden_dim]` output. `w` supplies the query/rotary projections and
/// the normalization gain; `aw` must come from [`absorb`] of the same set.
pub fn mla_decode_step(
    cfg: &ModelConfig,
    w: &WeightSet,
    aw: &AbsorbedWeights,
    x_t: &Matrix,
    cache: &mut LatentCache,
) -> Result<Matrix> {
    if x_t.rows() != 1 || x_t.cols() != cfg.hidden_dim {
        return Err(Error::shape(
            "mla_decode_step",
            format!("token must be 1x{}, got {}x{}", cfg.hidden_dim, x_t.rows(), x_t.cols()),
        ));
    }
    if aw.q_to_latent.len() != cfg.num_heads {
        return Err(Error::shape(
            "mla_decode_step",
            format!("{} absorbed heads for {} heads", aw.q_to_latent.len(), cfg.num_heads),
        ));
    }
    let pos = cache.next_position();
    let c_new = x_t.matmul(&w.kv_down)?;
    let k_pe_new = rope_apply(&x_t.matmul(&w.k_rope)?, &[pos])?;
    cache.append(c_new.row(0), k_pe_new.row(0), pos)?;

    let c_hat = rmsnorm(&w.norm_gamma, cache.latents(), cfg.eps)?;
    let seq = cache.len();
    let dr = cfg.rope_dim;

    let c_q = x_t.matmul(&w.q_down)?;
    let queries = c_q.matmul(&w.q_up)?;
    let rope_queries = c_q.matmul(&w.q_rope)?;

    let scale = cfg.logit_scale();
    let mut out = Matrix::zeros(1, cfg.hidden_dim);
    for i in 0..cfg.num_heads {
        let q_i = queries.slice_cols(i * cfg.head_dim, (i + 1) * cfg.head_dim)?;
        let q_lat = q_i.matmul(&aw.q_to_latent[i])?; // [1 x latent_dim]
        let q_pe_i = rope_apply(&rope_queries.slice_cols(i * dr, (i + 1) * dr)?, &[pos])?;

        let mut logits = vec![0.0; seq];
        for (s, logit) in logits.iter_mut().enumerate() {
            let l = dot(q_lat.row(0), c_hat.row(s)) + dot(q_pe_i.row(0), cache.rope_keys().row(s));
            *logit = l * scale;
        }
        softmax_in_place(&mut logits);

        // Attended latent, then straight to model width.
        let mut attended = vec![0.0; cfg.latent_dim];
        for (s, &p) in logits.iter().enumerate() {
            let row = c_hat.row(s);
            for (a, &v) in attended.iter_mut().zip(row) {
                *a += p * v;
            }
        }
        let head_out = Matrix::from_row(&attended).matmul(&aw.latent_to_out[i])?;
        out = out.add(&head_out)?;
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Squared norms of the full (unsliced) latent rows; the sharded cache keeps
/// these alongside each slice so exact-RMS modes can be replayed.
pub fn latent_row_sqnorms(cache: &LatentCache) -> Vec<f64> {
    (0..cache.len()).map(|r| sqnorm(cache.latents().row(r))).collect()
}

// Serialization of shapes for reports (weights themselves travel through the
// binary container, not JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightShapes {
    pub kv_down: (usize, usize),
    pub k_rope: (usize, usize),
    pub q_down: (usize, usize),
    pub q_up: (usize, usize),
    pub q_rope: (usize, usize),
    pub k_up: (usize, usize),
    pub v_up: (usize, usize),
    pub out_proj: (usize, usize),
    pub norm_gamma: usize,
}

impl WeightSet {
    pub fn shapes(&self) -> WeightShapes {
        let dims = |m: &Matrix| (m.rows(), m.cols());
        WeightShapes {
            kv_down: dims(&self.kv_down),
            k_rope: dims(&self.k_rope),
            q_down: dims(&self.q_down),
            q_up: dims(&self.q_up),
            q_rope: dims(&self.q_rope),
            k_up: dims(&self.k_up),
            v_up: dims(&self.v_up),
            out_proj: dims(&self.out_proj),
            norm_gamma: self.norm_gamma.len(),
        }
    }
}
