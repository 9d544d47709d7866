//! The named invariant suite behind `zhyper check`: fast, self-contained
//! verifications of the properties the whole design leans on. Each check
//! returns a one-line quantitative summary on success so a passing run
//! still shows what was measured.
//!
//! These are deliberately smaller and faster than the full acceptance
//! suite — seconds, not minutes — while touching the same claims:
//! budget arithmetic, the algebraic containment ladder, warm-start and
//! reduction laws, materialization equivalence, gradient correctness,
//! format round-trips, and training determinism.

use crate::complexity::{lora_param_count, method_budget, ArchSpec, HyperSpec, Method};
use crate::contexts::{read_context_store, write_context_store, ContextRecord, ContextStore};
use crate::error::{Error, Result};
use crate::hypernet::HyperVariant;
use crate::lora::{
    best_diag_fit, delta_weight, embed_diag_in_square, factor_square_into_full, rotation_witness,
    LoRAPair, Modulation, ProjKind,
};
use crate::model::{forward_adapted, forward_base, init_base, init_pairs, ModelConfig};
use crate::numerics::gradcheck::max_grad_mismatch;
use crate::numerics::ztsr::{read_tensor, write_tensor};
use crate::numerics::{Precision, Rng, Tensor};
use crate::params::ParamBag;
use crate::training::{
    init_conditioned, lr_at, train_zhyper, FixedContexts, TrainConfig, TrainExample, TrainMode,
};
use crate::zadp::{read_adapter_set, write_adapter_set};

/// One named invariant: its outcome is either a measurement summary or
/// the failure that broke it.
pub struct CheckOutcome {
    pub name: &'static str,
    pub outcome: Result<String>,
}

/// Run every check. `seed` feeds all randomized instances, so a failing
/// run can be replayed exactly.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let checks: [(&'static str, fn(u64) -> Result<String>); 9] = [
        ("budget-table", budget_table),
        ("algebraic-containment", algebraic_containment),
        ("rotation-escape", rotation_escape),
        ("warm-start-laws", warm_start_laws),
        ("materialization-equivalence", materialization_equivalence),
        ("gradient-spot-check", gradient_spot_check),
        ("format-round-trips", format_round_trips),
        ("training-determinism", training_determinism),
        ("schedule-shape", schedule_shape),
    ];
    checks
        .into_iter()
        .map(|(name, f)| CheckOutcome {
            name,
            outcome: f(seed),
        })
        .collect()
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|c| c.outcome.is_ok())
}

fn fail(name: &str, detail: impl std::fmt::Display) -> Error {
    Error::contract(format!("{name}: {detail}"))
}

// ── Individual checks ────────────────────────────────────────────────

/// Factor counts hit the published integers exactly; conditioned totals
/// land inside the ±5% bands; the full-emission baseline costs ≥ 26×.
fn budget_table(_seed: u64) -> Result<String> {
    for (rank, expect) in [(8, 3_407_872usize), (16, 6_815_744), (32, 13_631_488)] {
        let got = lora_param_count(&ArchSpec::ref_7b(rank))?;
        if got != expect {
            return Err(fail("budget-table", format!("rank {rank}: {got} ≠ {expect}")));
        }
    }
    let hspec = HyperSpec::canonical();
    let bands = [
        (Method::ZhyperDiag, [(8, 4.21), (16, 7.62), (32, 14.46)]),
        (Method::ZhyperSquare, [(8, 4.27), (16, 7.87), (32, 15.47)]),
    ];
    for (method, targets) in bands {
        for (rank, target_m) in targets {
            let total = method_budget(method, &ArchSpec::ref_7b(rank), &hspec)?.total;
            let target = target_m * 1e6;
            if (total as f64 - target).abs() > 0.05 * target {
                return Err(fail(
                    "budget-table",
                    format!("{method} rank {rank}: {total} outside ±5% of {target_m}M"),
                ));
            }
        }
    }
    let t2l = method_budget(Method::T2l, &ArchSpec::ref_7b(16), &hspec)?.total;
    let diag = method_budget(Method::ZhyperDiag, &ArchSpec::ref_7b(8), &hspec)?.total;
    let ratio = t2l as f64 / diag as f64;
    if ratio < 26.0 {
        return Err(fail("budget-table", format!("t2l/diag ratio {ratio:.2} < 26")));
    }
    Ok(format!(
        "factor counts exact at r=8/16/32; totals within ±5%; t2l/diag = {ratio:.2}×"
    ))
}

/// Random instances of the containment ladder: every diagonal signal is
/// a square signal, and every square signal folds into plain factors.
fn algebraic_containment(seed: u64) -> Result<String> {
    let mut rng = Rng::new(seed).split(0xA16E);
    let mut worst = 0.0_f64;
    for i in 0..100 {
        let d_in = 2 + rng.below(15);
        let d_out = 2 + rng.below(15);
        let rank = 1 + rng.below(4);
        let gauss =
            |shape: &[usize], rng: &mut Rng| -> Result<Tensor> {
                let n: usize = shape.iter().product();
                Tensor::from_vec(shape, (0..n).map(|_| rng.standard_normal()).collect())
            };
        let pair = LoRAPair::new(
            gauss(&[d_in, rank], &mut rng)?,
            gauss(&[rank, d_out], &mut rng)?,
            2.0,
        )?;
        let z = gauss(&[rank], &mut rng)?;

        // diag(z) seen as a square matrix gives the identical delta.
        let diag_delta = delta_weight(&pair, &Modulation::Diag(z.clone()))?;
        let square_delta =
            delta_weight(&pair, &Modulation::Square(embed_diag_in_square(&z)?))?;
        worst = worst.max(max_abs_diff(&diag_delta, &square_delta));

        // An arbitrary square signal folds into an unconstrained pair.
        let zq = gauss(&[rank, rank], &mut rng)?;
        let full_delta = delta_weight(&pair, &Modulation::Square(zq.clone()))?;
        let (a2, b2) = factor_square_into_full(&pair, &zq)?;
        let folded = LoRAPair::new(a2, b2, pair.scale)?;
        let folded_delta = delta_weight(&folded, &Modulation::Identity)?;
        worst = worst.max(max_abs_diff(&full_delta, &folded_delta));

        if worst > 1e-12 {
            return Err(fail(
                "algebraic-containment",
                format!("instance {i}: max |Δ| error {worst:.3e} > 1e-12"),
            ));
        }
    }
    Ok(format!("100 instances, max |Δ| error {worst:.3e}"))
}

/// The square family is strictly bigger: a rotation's delta admits no
/// diagonal fit.
fn rotation_escape(_seed: u64) -> Result<String> {
    let (pair, z) = rotation_witness();
    let (_, residual) = best_diag_fit(&pair, &z)?;
    if residual <= 1e-3 {
        return Err(fail(
            "rotation-escape",
            format!("best diagonal fit residual {residual:.3e} ≤ 1e-3"),
        ));
    }
    Ok(format!("best diagonal fit leaves residual {residual:.3}"))
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 11,
        max_seq: 8,
        q_out: 8,
        v_out: 4,
    }
}

fn tiny_train_cfg(variant: HyperVariant) -> TrainConfig {
    let mode = match variant {
        HyperVariant::Diag => TrainMode::ZhyperDiag,
        HyperVariant::Square => TrainMode::ZhyperSquare,
    };
    let mut cfg = TrainConfig::desk_defaults(mode);
    cfg.rank = 2;
    cfg.hyper_d_in = 6;
    cfg.hyper_d_hidden = 8;
    cfg.hyper_d_out = 8;
    cfg.hyper_d_t = 3;
    cfg.hyper_d_l = 3;
    cfg
}

fn gauss_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal()).collect()
}

/// Fresh models are exactly the base model (zero factors), identity
/// signals are exactly the plain factor forward, and a zeroed signal
/// collapses an arbitrary adapter back to the base.
fn warm_start_laws(seed: u64) -> Result<String> {
    let mut rng = Rng::new(seed).split(0x3A7);
    let cfg = tiny_cfg();
    let tokens = [1usize, 4, 2, 9];
    let mut worst_fresh = 0.0_f64;
    for variant in [HyperVariant::Diag, HyperVariant::Square] {
        let base = init_base(&cfg, &mut rng)?;
        let plain = forward_base(&base, &tokens)?;
        let mut tc = tiny_train_cfg(variant);
        tc.seed = rng.below(1 << 30) as u64;
        let model = init_conditioned(base, 5, &tc)?;
        let c = Tensor::from_vec(&[5], gauss_vec(&mut rng, 5))?;
        let conditioned = model.forward_conditioned(&tokens, &c)?;
        worst_fresh = worst_fresh.max(max_abs_diff(&plain, &conditioned));
    }
    if worst_fresh > 1e-10 {
        return Err(fail(
            "warm-start-laws",
            format!("fresh conditioned logits drift {worst_fresh:.3e} from base"),
        ));
    }

    // Live factors now: identity modulation must equal the bare pair
    // bitwise, and an all-zero signal must restore the base bitwise.
    let base = init_base(&cfg, &mut rng)?;
    let mut pairs = init_pairs(&cfg, 2, 2.0, 0.2, &mut rng)?;
    pairs = pairs.with_modulations(|_, pair| {
        Ok(Modulation::Diag(Tensor::from_vec(
            &[pair.rank],
            vec![1.0; pair.rank],
        )?))
    })?;
    // Give B real mass so the adapter actually changes the logits.
    let live = pairs.with_modulations(|_, _| Ok(Modulation::Identity))?;
    let mut live_b = std::collections::BTreeMap::new();
    for (key, (pair, _)) in live.iter() {
        let b = Tensor::from_vec(
            &[pair.rank, pair.d_out()],
            gauss_vec(&mut rng, pair.rank * pair.d_out()),
        )?;
        live_b.insert(*key, (LoRAPair::new(pair.a.clone(), b, pair.scale)?, Modulation::Identity));
    }
    let live = crate::lora::AdapterSet::new(cfg.layers, &ProjKind::ALL, live_b)?;
    let ones = live.with_modulations(|_, pair| {
        Ok(Modulation::Diag(Tensor::from_vec(
            &[pair.rank],
            vec![1.0; pair.rank],
        )?))
    })?;
    let zeros = live.with_modulations(|_, pair| {
        Ok(Modulation::Diag(Tensor::zeros(&[pair.rank])))
    })?;
    let with_identity = forward_adapted(&base, &live, &tokens)?;
    let with_ones = forward_adapted(&base, &ones, &tokens)?;
    let with_zeros = forward_adapted(&base, &zeros, &tokens)?;
    let plain = forward_base(&base, &tokens)?;
    if max_abs_diff(&with_identity, &with_ones) != 0.0 {
        return Err(fail(
            "warm-start-laws",
            "ones signal is not bitwise the identity forward",
        ));
    }
    let zero_gap = max_abs_diff(&with_zeros, &plain);
    if zero_gap > 1e-12 {
        return Err(fail(
            "warm-start-laws",
            format!("zero signal leaves residual {zero_gap:.3e} over the base"),
        ));
    }
    let live_gap = max_abs_diff(&with_identity, &plain);
    if live_gap < 1e-6 {
        return Err(fail(
            "warm-start-laws",
            "adapter with live B failed to move the logits; the law checks nothing",
        ));
    }
    Ok(format!(
        "fresh drift {worst_fresh:.1e}; ones ≡ identity bitwise; zero-signal residual ≤ 1e-12"
    ))
}

/// Baking the per-context signal into a static adapter bank reproduces
/// the conditioned forward, and the bank's signal payload is exactly
/// layers × types × r (or r²).
fn materialization_equivalence(seed: u64) -> Result<String> {
    let mut rng = Rng::new(seed).split(0x3A8);
    let cfg = tiny_cfg();
    let mut worst = 0.0_f64;
    for trial in 0..20 {
        let variant = if trial % 2 == 0 {
            HyperVariant::Diag
        } else {
            HyperVariant::Square
        };
        let base = init_base(&cfg, &mut rng)?;
        let mut tc = tiny_train_cfg(variant);
        tc.seed = 1000 + trial as u64;
        tc.a_init_std = 0.5;
        let mut model = init_conditioned(base, 5, &tc)?;
        // Fresh inits have B = 0; perturb every parameter so the
        // equivalence is tested with live signals, not zeros.
        let mut jiggle = Rng::new(seed).split(trial as u64);
        model = model.map(&mut |t: &Tensor| {
            let data: Vec<f64> = t
                .data()
                .iter()
                .map(|v| v + 0.3 * jiggle.standard_normal())
                .collect();
            t.with_data(data).expect("same shape")
        });
        let c = Tensor::from_vec(&[5], gauss_vec(&mut rng, 5))?;
        let tokens = [2usize, 7, 1, 10, 3];
        let conditioned = model.forward_conditioned(&tokens, &c)?;
        let bank = model.materialize_adapter(&c)?;
        let baked = forward_adapted(&model.base, &bank, &tokens)?;
        worst = worst.max(max_abs_diff(&conditioned, &baked));

        let per_site = variant.signal_len(tc.rank);
        let want = cfg.layers * ProjKind::ALL.len() * per_site;
        if bank.signal_size() != want {
            return Err(fail(
                "materialization-equivalence",
                format!("signal payload {} ≠ {want}", bank.signal_size()),
            ));
        }
    }
    if worst > 1e-10 {
        return Err(fail(
            "materialization-equivalence",
            format!("baked forward drifts {worst:.3e} > 1e-10"),
        ));
    }
    Ok(format!("20 triples, max logit gap {worst:.3e}"))
}

/// Names for the parameter slots of a 2-layer tiny conditioned model,
/// in `ParamBag` visit order: 4 factor pairs, then the trunk.
fn slot_groups(layers: usize) -> Vec<(&'static str, Vec<usize>)> {
    let n_pairs = 2 * layers; // Q and V per layer
    let a_slots: Vec<usize> = (0..n_pairs).map(|i| 2 * i).collect();
    let b_slots: Vec<usize> = (0..n_pairs).map(|i| 2 * i + 1).collect();
    let h = 2 * n_pairs; // first hypernetwork slot
    vec![
        ("factor-a", a_slots),
        ("factor-b", b_slots),
        ("type-table", vec![h]),
        ("layer-table", vec![h + 1]),
        ("trunk-proj", vec![h + 2, h + 3]),
        ("trunk-blocks", (h + 4..h + 10).collect()),
        ("head", vec![h + 10, h + 11]),
    ]
}

/// Worst finite-difference mismatch per trainable group (and the
/// context-input path) of a tiny conditioned model, one random
/// instance per seed. Exposed so heavier suites can sweep seeds.
pub fn conditioned_grad_mismatches(
    seed: u64,
    variant: HyperVariant,
) -> Result<Vec<(String, f64)>> {
    let mut rng = Rng::new(seed).split(0x96AD);
    let cfg = tiny_cfg();
    let base = init_base(&cfg, &mut rng)?;
    let mut tc = tiny_train_cfg(variant);
    tc.seed = seed ^ 0x5ca1e;
    tc.a_init_std = 0.4;
    let mut model = init_conditioned(base, 5, &tc)?;
    // Perturb so B ≠ 0 and the head is off its zero init: gradients at
    // the warm start would vanish for half the groups.
    let mut jiggle = rng.split(1);
    model = model.map(&mut |t: &Tensor| {
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|v| v + 0.25 * jiggle.standard_normal())
            .collect();
        t.with_data(data).expect("same shape")
    });
    let tokens = [3usize, 9, 5, 1];
    let (inputs, targets) = (&tokens[..3], &tokens[1..]);
    let c = Tensor::from_vec(&[5], gauss_vec(&mut rng, 5))?;

    let loss_with = |m: &crate::model::ConditionedModel, ctx: &Tensor| -> Result<Tensor> {
        let logits = m.forward_conditioned(inputs, ctx)?;
        let (sum, count) = logits.cross_entropy_sum(targets, 0.1, 0)?;
        Ok(sum.scale(1.0 / count as f64))
    };

    let n_slots = {
        let mut n = 0;
        model.visit(&mut |_| n += 1);
        n
    };
    let slot_tensor = |k: usize| -> Tensor {
        let mut i = 0;
        let mut found = None;
        model.visit(&mut |t| {
            if i == k {
                found = Some(t.clone());
            }
            i += 1;
        });
        found.expect("slot index in range")
    };

    let mut results = Vec::new();
    for (group, slots) in slot_groups(cfg.layers) {
        let mut worst = 0.0_f64;
        for &k in &slots {
            if k >= n_slots {
                return Err(fail("gradient-spot-check", format!("slot {k} out of range")));
            }
            let probe = slot_tensor(k);
            let f = |t: &Tensor| -> Result<Tensor> {
                let mut i = 0;
                let patched = model.map(&mut |old: &Tensor| {
                    let out = if i == k { t.clone() } else { old.clone() };
                    i += 1;
                    out
                });
                loss_with(&patched, &c)
            };
            worst = worst.max(max_grad_mismatch(&f, &probe, 1e-5)?);
        }
        results.push((group.to_string(), worst));
    }
    // The context embedding is an input, not a parameter, but its
    // gradient path must be just as sound (adapters are generated from
    // it).
    let f = |ctx: &Tensor| loss_with(&model, ctx);
    results.push(("context-input".to_string(), max_grad_mismatch(&f, &c, 1e-5)?));
    Ok(results)
}

/// A few random instances of the per-group finite-difference check;
/// the acceptance suite runs the full sweep.
fn gradient_spot_check(seed: u64) -> Result<String> {
    let mut worst = 0.0_f64;
    let mut worst_group = String::new();
    for (i, variant) in [HyperVariant::Diag, HyperVariant::Square, HyperVariant::Diag]
        .into_iter()
        .enumerate()
    {
        for (group, err) in conditioned_grad_mismatches(seed + i as u64, variant)? {
            if err > worst {
                worst = err;
                worst_group = group.clone();
            }
            if err > 1e-4 {
                return Err(fail(
                    "gradient-spot-check",
                    format!("group {group}: rel err {err:.3e} > 1e-4"),
                ));
            }
        }
    }
    Ok(format!("3 instances × 8 groups, worst rel err {worst:.1e} ({worst_group})"))
}

/// Every binary format survives write→read→write byte-identically and
/// rejects a corrupted payload with a located error.
fn format_round_trips(seed: u64) -> Result<String> {
    let mut rng = Rng::new(seed).split(0xF0F0);

    // Tensor files.
    let t = Tensor::from_vec(&[3, 4], gauss_vec(&mut rng, 12))?;
    let mut buf = Vec::new();
    write_tensor(&mut buf, &t, Precision::F64)?;
    let (back, precision) = read_tensor(&mut buf.as_slice())?;
    let mut again = Vec::new();
    write_tensor(&mut again, &back, precision)?;
    if buf != again {
        return Err(fail("format-round-trips", "tensor bytes changed across a round trip"));
    }
    let mut nan_payload = buf.clone();
    let nan_bits = f64::NAN.to_le_bytes();
    let n = nan_payload.len();
    nan_payload[n - 8..].copy_from_slice(&nan_bits);
    if read_tensor(&mut nan_payload.as_slice()).is_ok() {
        return Err(fail("format-round-trips", "NaN tensor payload was accepted"));
    }

    // Context stores.
    let store = ContextStore::new(
        4,
        vec![
            ContextRecord::new("a", "d1", "first", Tensor::from_vec(&[4], gauss_vec(&mut rng, 4))?)?,
            ContextRecord::new("b", "d1", "second", Tensor::from_vec(&[4], gauss_vec(&mut rng, 4))?)?,
        ],
    )?;
    let mut zemb = Vec::new();
    write_context_store(&mut zemb, &store)?;
    let back = read_context_store(&mut zemb.as_slice())?;
    let mut zemb_again = Vec::new();
    write_context_store(&mut zemb_again, &back)?;
    if zemb != zemb_again {
        return Err(fail("format-round-trips", "context bytes changed across a round trip"));
    }
    let mut truncated = zemb.clone();
    truncated.truncate(zemb.len() - 3);
    if read_context_store(&mut truncated.as_slice()).is_ok() {
        return Err(fail("format-round-trips", "truncated context store was accepted"));
    }

    // Adapter files (CRC-protected).
    let pairs = init_pairs(&tiny_cfg(), 2, 2.0, 0.3, &mut rng)?;
    let mut zadp = Vec::new();
    write_adapter_set(&mut zadp, &pairs, Precision::F64)?;
    let (bank, precision) = read_adapter_set(&mut zadp.as_slice())?;
    let mut zadp_again = Vec::new();
    write_adapter_set(&mut zadp_again, &bank, precision)?;
    if zadp != zadp_again {
        return Err(fail("format-round-trips", "adapter bytes changed across a round trip"));
    }
    let mut flipped = zadp.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    if read_adapter_set(&mut flipped.as_slice()).is_ok() {
        return Err(fail(
            "format-round-trips",
            "bit-flipped adapter passed its integrity check",
        ));
    }
    Ok("ztsr, zemb, zadp: byte-stable round trips; corruption rejected".to_string())
}

/// Two runs of the same seeded training command agree bit for bit.
fn training_determinism(seed: u64) -> Result<String> {
    let corpus: Vec<TrainExample> = (0..6)
        .map(|i| TrainExample {
            tokens: vec![1, 2 + (i % 3), 2 + (i % 3), 2 + (i % 3)],
            loss_from: 1,
            dataset: "d".to_string(),
        })
        .collect();
    let contexts = FixedContexts {
        by_dataset: [("d".to_string(), Tensor::from_vec(&[5], vec![0.4, -1.0, 0.2, 0.0, 1.1])?)]
            .into_iter()
            .collect(),
        d_c: 5,
    };
    let mut tc = tiny_train_cfg(HyperVariant::Diag);
    tc.steps = 6;
    tc.batch_size = 3;
    tc.seed = seed ^ 0xD13;

    let run = || -> Result<(Vec<(usize, f64)>, Vec<u8>)> {
        let base = init_base(&tiny_cfg(), &mut Rng::new(seed ^ 0xBA5E))?;
        let (model, logs) = train_zhyper(base, &corpus, &contexts, &tc)?;
        let trace: Vec<(usize, f64)> = logs.iter().map(|l| (l.step, l.loss)).collect();
        let mut bytes = Vec::new();
        model.visit(&mut |t| {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        });
        Ok((trace, bytes))
    };
    let (trace_a, bytes_a) = run()?;
    let (trace_b, bytes_b) = run()?;
    if trace_a != trace_b {
        return Err(fail("training-determinism", "loss traces differ between runs"));
    }
    if bytes_a != bytes_b {
        return Err(fail("training-determinism", "final weights differ between runs"));
    }
    Ok(format!(
        "two 6-step runs bitwise identical (final loss {:.6})",
        trace_a.last().map(|(_, l)| *l).unwrap_or(f64::NAN)
    ))
}

/// Warmup rises from zero to the peak, decay ends at zero, and the last
/// scheduled step still trains.
fn schedule_shape(_seed: u64) -> Result<String> {
    let (total, max_lr, frac) = (40, 3e-3, 0.2);
    let warmup = (frac * total as f64).ceil() as usize;
    if lr_at(0, total, max_lr, frac) != 0.0 {
        return Err(fail("schedule-shape", "step 0 is not silent"));
    }
    let peak = lr_at(warmup, total, max_lr, frac);
    if (peak - max_lr).abs() > 1e-15 {
        return Err(fail("schedule-shape", format!("peak {peak} ≠ max_lr {max_lr}")));
    }
    for step in 1..total {
        let here = lr_at(step, total, max_lr, frac);
        if here <= 0.0 {
            return Err(fail("schedule-shape", format!("lr at step {step} is {here}")));
        }
        let slope_up = step <= warmup;
        let prev = lr_at(step - 1, total, max_lr, frac);
        if slope_up && here < prev {
            return Err(fail("schedule-shape", format!("warmup dips at step {step}")));
        }
        if !slope_up && here > prev {
            return Err(fail("schedule-shape", format!("decay rises at step {step}")));
        }
    }
    if lr_at(total, total, max_lr, frac) != 0.0 {
        return Err(fail("schedule-shape", "schedule does not end at zero"));
    }
    Ok(format!("warmup {warmup} steps to {max_lr:.0e}, linear decay to 0 at {total}"))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_whole_suite_passes_on_a_fresh_build() {
        let outcomes = run_all(7);
        for c in &outcomes {
            match &c.outcome {
                Ok(detail) => assert!(!detail.is_empty(), "{} has no summary", c.name),
                Err(e) => panic!("{} failed: {e}", c.name),
            }
        }
        assert!(all_passed(&outcomes));
        assert_eq!(outcomes.len(), 9);
    }

    #[test]
    fn group_gradients_hold_across_extra_seeds() {
        for seed in [31, 32] {
            for variant in [HyperVariant::Diag, HyperVariant::Square] {
                for (group, err) in conditioned_grad_mismatches(seed, variant).unwrap() {
                    assert!(err <= 1e-4, "{group} at seed {seed}: {err}");
                }
            }
        }
    }

    #[test]
    fn slot_map_matches_the_bag_layout() {
        // If the visit order of the conditioned model ever changes, the
        // named groups must fail loudly rather than silently checking
        // the wrong tensors: verify the slot count covers the model.
        let groups = slot_groups(2);
        let max_slot = groups
            .iter()
            .flat_map(|(_, slots)| slots.iter().copied())
            .max()
            .unwrap();
        let mut tc = tiny_train_cfg(HyperVariant::Diag);
        tc.seed = 3;
        let base = init_base(&tiny_cfg(), &mut Rng::new(4)).unwrap();
        let model = init_conditioned(base, 5, &tc).unwrap();
        let mut n = 0;
        model.visit(&mut |_| n += 1);
        assert_eq!(max_slot + 1, n, "groups must cover every parameter slot");
    }
}
