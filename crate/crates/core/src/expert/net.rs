//! Policy and value networks: a per-row MLP encoder, ego-query multi-head
//! attention over the observation rows, and an MLP decoder head.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::autodiff::{ArrayId, NumericsError, Tape};
use crate::params::{normal_init, ParamError, ParamSet};
use crate::sim::{ObservationMatrix, N_OBS, OBS_FEATURES};

pub const ENCODER_WIDTH: usize = 64;
pub const ATTENTION_FEATURES: usize = 128;
pub const ATTENTION_HEADS: usize = 2;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("empty observation batch")]
    EmptyBatch,
    #[error("observation row 0 (ego) must be present")]
    MissingEgo,
}

/// Parameter indices of one encoder/attention/decoder trunk.
#[derive(Debug, Clone, Copy)]
struct TrunkIdx {
    enc1_w: usize,
    enc1_b: usize,
    enc2_w: usize,
    enc2_b: usize,
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    comb_w: usize,
    comb_b: usize,
    dec1_w: usize,
    dec1_b: usize,
    dec2_w: usize,
    dec2_b: usize,
    head_w: usize,
    head_b: usize,
}

fn push_linear(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Result<(usize, usize), ParamError> {
    let std = scale / (rows as f64).sqrt();
    let w = params.push(format!("{name}.w"), rows, cols, normal_init(rng, rows, cols, std))?;
    let b = params.push(format!("{name}.b"), 1, cols, vec![0.0; cols])?;
    Ok((w, b))
}

fn push_trunk(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    head_cols: usize,
    head_scale: f64,
) -> Result<TrunkIdx, ParamError> {
    let e = ENCODER_WIDTH;
    let a = ATTENTION_FEATURES;
    let (enc1_w, enc1_b) = push_linear(params, rng, &format!("{prefix}.enc1"), OBS_FEATURES, e, 1.0)?;
    let (enc2_w, enc2_b) = push_linear(params, rng, &format!("{prefix}.enc2"), e, e, 1.0)?;
    let (q_w, q_b) = push_linear(params, rng, &format!("{prefix}.attn_q"), e, a, 1.0)?;
    let (k_w, k_b) = push_linear(params, rng, &format!("{prefix}.attn_k"), e, a, 1.0)?;
    let (v_w, v_b) = push_linear(params, rng, &format!("{prefix}.attn_v"), e, a, 1.0)?;
    let (comb_w, comb_b) = push_linear(params, rng, &format!("{prefix}.attn_out"), a, a, 1.0)?;
    let (dec1_w, dec1_b) = push_linear(params, rng, &format!("{prefix}.dec1"), a, e, 1.0)?;
    let (dec2_w, dec2_b) = push_linear(params, rng, &format!("{prefix}.dec2"), e, e, 1.0)?;
    let (head_w, head_b) = push_linear(params, rng, &format!("{prefix}.head"), e, head_cols, head_scale)?;
    Ok(TrunkIdx {
        enc1_w,
        enc1_b,
        enc2_w,
        enc2_b,
        q_w,
        q_b,
        k_w,
        k_b,
        v_w,
        v_b,
        comb_w,
        comb_b,
        dec1_w,
        dec1_b,
        dec2_w,
        dec2_b,
        head_w,
        head_b,
    })
}

/// Policy and value networks of one expert. The two trunks share the layout
/// but no parameters; both live in one [`ParamSet`] so a single optimizer
/// and checkpoint covers the expert.
pub struct ExpertNets {
    pub params: ParamSet,
    policy: TrunkIdx,
    value: TrunkIdx,
}

impl ExpertNets {
    pub fn init(seed: u64) -> Result<Self, NetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        // near-uniform initial policy: small logits head
        let policy = push_trunk(&mut params, &mut rng, "policy", 3, 0.01)?;
        let value = push_trunk(&mut params, &mut rng, "value", 1, 1.0)?;
        Ok(Self { params, policy, value })
    }

    /// Rebuild the layout (for checkpoint loading); parameters are zero.
    pub fn layout() -> Result<Self, NetError> {
        // the RNG values are discarded by the loader; reuse init for shape
        Self::init(0)
    }

    /// Wrap an existing parameter set (same layout as [`ExpertNets::init`]).
    pub fn with_params(params: ParamSet) -> Result<Self, NetError> {
        let mut nets = Self::layout()?;
        nets.params = params;
        Ok(nets)
    }

    fn trunk_forward(
        &self,
        tape: &mut Tape,
        idx: &TrunkIdx,
        batch: &[&ObservationMatrix],
    ) -> Result<ArrayId, NetError> {
        if batch.is_empty() {
            return Err(NetError::EmptyBatch);
        }
        let b = batch.len();
        let mut rows = Vec::with_capacity(b * N_OBS * OBS_FEATURES);
        let mut mask = Vec::with_capacity(b * N_OBS);
        for obs in batch {
            if !obs.presence[0] {
                return Err(NetError::MissingEgo);
            }
            for row in &obs.rows {
                rows.extend_from_slice(row);
            }
            mask.extend_from_slice(&obs.presence);
        }
        let x = tape.leaf(b * N_OBS, OBS_FEATURES, rows)?;

        let lin = |tape: &mut Tape, x: ArrayId, w: usize, bias: usize| -> Result<ArrayId, NumericsError> {
            let wp = tape.param(&self.params, w)?;
            let bp = tape.param(&self.params, bias)?;
            let y = tape.matmul(x, wp)?;
            tape.add_bias(y, bp)
        };

        let h = lin(tape, x, idx.enc1_w, idx.enc1_b)?;
        let h = tape.tanh(h)?;
        let h = lin(tape, h, idx.enc2_w, idx.enc2_b)?;
        let enc = tape.tanh(h)?;

        let ego_rows: Vec<usize> = (0..b).map(|i| i * N_OBS).collect();
        let ego = tape.gather_rows(enc, &ego_rows)?;
        let q = lin(tape, ego, idx.q_w, idx.q_b)?;
        let k = lin(tape, enc, idx.k_w, idx.k_b)?;
        let v = lin(tape, enc, idx.v_w, idx.v_b)?;
        let att = tape.pooled_attention(q, k, v, ATTENTION_HEADS, N_OBS, &mask)?;
        let att = lin(tape, att, idx.comb_w, idx.comb_b)?;

        let h = lin(tape, att, idx.dec1_w, idx.dec1_b)?;
        let h = tape.tanh(h)?;
        let h = lin(tape, h, idx.dec2_w, idx.dec2_b)?;
        let h = tape.tanh(h)?;
        Ok(lin(tape, h, idx.head_w, idx.head_b)?)
    }

    /// Action logits `[B, 3]` for a batch of observations.
    pub fn policy_logits(
        &self,
        tape: &mut Tape,
        batch: &[&ObservationMatrix],
    ) -> Result<ArrayId, NetError> {
        self.trunk_forward(tape, &self.policy, batch)
    }

    /// State values `[B, 1]` for a batch of observations.
    pub fn state_values(
        &self,
        tape: &mut Tape,
        batch: &[&ObservationMatrix],
    ) -> Result<ArrayId, NetError> {
        self.trunk_forward(tape, &self.value, batch)
    }

    /// Evaluation-mode policy distribution and value for one observation.
    pub fn policy_forward(&self, obs: &ObservationMatrix) -> Result<([f64; 3], f64), NetError> {
        let mut tape = Tape::new();
        let logits = self.policy_logits(&mut tape, &[obs])?;
        let probs = tape.softmax_rows(logits)?;
        let p = tape.values(probs);
        let dist = [p[0], p[1], p[2]];
        let values = self.state_values(&mut tape, &[obs])?;
        let v = tape.values(values)[0];
        Ok((dist, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs_with(rows: &[([f64; 4], bool)]) -> ObservationMatrix {
        let mut m = ObservationMatrix { rows: [[0.0; 4]; N_OBS], presence: [false; N_OBS] };
        for (i, (r, p)) in rows.iter().enumerate() {
            m.rows[i] = *r;
            m.presence[i] = *p;
        }
        m
    }

    #[test]
    fn distribution_sums_to_one() {
        let nets = ExpertNets::init(7).unwrap();
        let obs = obs_with(&[
            ([0.1, -0.2, 0.5, 0.0], true),
            ([0.2, -0.1, 0.3, 0.1], true),
            ([0.0, 0.3, -0.2, 0.4], true),
        ]);
        let (dist, v) = nets.policy_forward(&obs).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.is_finite());
    }

    #[test]
    fn absent_row_contents_cannot_influence_the_policy() {
        let nets = ExpertNets::init(8).unwrap();
        let base = obs_with(&[([0.1, -0.2, 0.5, 0.0], true), ([0.2, -0.1, 0.3, 0.1], true)]);
        let (d0, v0) = nets.policy_forward(&base).unwrap();
        let mut garbled = base.clone();
        garbled.rows[5] = [0.9, -0.8, 0.7, -0.6]; // absent row, garbage features
        let (d1, v1) = nets.policy_forward(&garbled).unwrap();
        for (a, b) in d0.iter().zip(&d1) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(v0.to_bits(), v1.to_bits());
    }

    #[test]
    fn equidistant_rows_commute_up_to_float_reduction() {
        let nets = ExpertNets::init(9).unwrap();
        let a = ([0.05, 0.0, 0.3, 0.0], true);
        let b = ([-0.05, 0.0, -0.3, 0.0], true);
        let ego = ([0.0, -0.3, 0.5, 0.0], true);
        let (d0, _) = nets.policy_forward(&obs_with(&[ego, a, b])).unwrap();
        let (d1, _) = nets.policy_forward(&obs_with(&[ego, b, a])).unwrap();
        for (x, y) in d0.iter().zip(&d1) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn missing_ego_is_rejected() {
        let nets = ExpertNets::init(10).unwrap();
        let mut obs = obs_with(&[([0.0; 4], true)]);
        obs.presence[0] = false;
        assert!(matches!(nets.policy_forward(&obs), Err(NetError::MissingEgo)));
    }

    #[test]
    fn policy_and_value_share_no_parameters() {
        let nets = ExpertNets::init(11).unwrap();
        let policy_names: Vec<&str> =
            nets.params.iter().map(|e| e.name.as_str()).filter(|n| n.starts_with("policy.")).collect();
        let value_names: Vec<&str> =
            nets.params.iter().map(|e| e.name.as_str()).filter(|n| n.starts_with("value.")).collect();
        assert_eq!(policy_names.len(), 18);
        assert_eq!(value_names.len(), 18);
    }
}
