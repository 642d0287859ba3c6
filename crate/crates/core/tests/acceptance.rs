//! Acceptance suite: the crate's behavioral contract, one test per
//! guarantee. Each test prints a single `ACCEPTANCE NN PASS/FAIL` line (run
//! with `--nocapture` to see the lines for passing tests; the harness itself
//! also reports one ok/FAILED line per criterion).
//!
//! Where a guarantee is about numeric agreement, the expected side is
//! computed by a test-local oracle written against the definitions, not by
//! calling back into the code under test: the brute-force transformer
//! forward pass, cosine ranking, and finite-difference gradients here share
//! no code with the library.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use neurolens::analysis::{error_pattern_from_counts, parse_label, ErrorPairCount, Prediction};
use neurolens::attribution::{logit_lens, score_neurons, NeuronGroup};
use neurolens::config::{Overrides, RunConfig};
use neurolens::corpus::{render_prompt, GroupLabel, PromptTemplate};
use neurolens::engine::{forward, greedy_generate, mlp_forward, CapturePlan, Pooling};
use neurolens::fixture;
use neurolens::linalg::Matrix;
use neurolens::model::{
    generate_synthetic_model, load_model, AttentionKind, LayerWeights, MlpKind, ModelConfig,
    NeuronRef,
};
use neurolens::pipeline::{run_probe_cmd, run_report_cmd};
use neurolens::probe::{loss_and_grad, train_probe_with_curve, ProbeHyper, ProbeMetrics};
use neurolens::rng::SplitMix64;
use neurolens::{InterventionPolicy, ModelBundle, SyntheticSpec, TokenId};

// ---------------------------------------------------------------------------
// Harness: one printed line per criterion, pass or fail.

fn criterion(n: u8, what: &str, check: impl FnOnce() -> Result<(), String>) {
    match check() {
        Ok(()) => println!("ACCEPTANCE {n:02} PASS — {what}"),
        Err(why) => {
            println!("ACCEPTANCE {n:02} FAIL — {what}: {why}");
            panic!("ACCEPTANCE {n:02} FAIL — {what}: {why}");
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

// ---------------------------------------------------------------------------
// Test-local numeric helpers (independent of the library's linalg).

fn o_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `x · M` computed column-by-column (the library accumulates row-by-row).
fn o_vec_mat(x: &[f64], m: &Matrix) -> Vec<f64> {
    (0..m.cols())
        .map(|c| (0..m.rows()).map(|r| x[r] * m.get(r, c)).sum())
        .collect()
}

fn o_norm(a: &[f64]) -> f64 {
    o_dot(a, a).sqrt()
}

fn o_silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn o_rms_norm(x: &[f64], scale: &[f64], eps: f64) -> Vec<f64> {
    let mean_sq = o_dot(x, x) / x.len() as f64;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    x.iter().zip(scale).map(|(v, s)| v * inv * s).collect()
}

// ---------------------------------------------------------------------------
// 01 — every MLP output is exactly the sum of its per-neuron writes.

#[test]
fn a01_mlp_output_decomposes_into_per_neuron_writes() {
    criterion(1, "MLP(x) = Σ aⱼ·vⱼ on 50 random models × 100 inputs", || {
        let started = Instant::now();
        let mut rng = SplitMix64::new(0xA01);
        for model_i in 0..50u64 {
            // d_model a multiple of 4 in 8..=32 so two heads get even dims;
            // d_mlp anywhere in 1..=64.
            let d_model = 4 * (2 + (rng.next_below(7) as usize));
            let d_mlp = 1 + rng.next_below(64) as usize;
            let spec = SyntheticSpec {
                d_model,
                n_layers: 1,
                n_heads: 2,
                d_mlp,
                seed: 0x5EED_0000 + model_i,
                vocab: neurolens::model::VocabSpec::Anonymous(8),
                attention: vec![AttentionKind::Random { sigma: 0.3 }],
                mlp: MlpKind::Random { sigma: 0.8 },
                ..Default::default()
            };
            let model = generate_synthetic_model(&spec)
                .map_err(|e| format!("model {model_i} failed to generate: {e}"))?;
            let layer = &model.layers[0];
            for input_i in 0..100 {
                let x = rng.gaussian_vec(d_model);
                let (output, acts) = mlp_forward(&x, layer);
                // Oracle: activations and the per-neuron sum from scratch.
                let gate = o_vec_mat(&x, &layer.w_gate);
                let up = o_vec_mat(&x, &layer.w_up);
                let mut sum = vec![0.0; d_model];
                for j in 0..d_mlp {
                    let a_j = o_silu(gate[j]) * up[j];
                    ensure!(
                        (acts[j] - a_j).abs() <= 1e-9 * a_j.abs().max(1.0),
                        "model {model_i} input {input_i}: activation {j} drifts \
                         ({} vs oracle {a_j})",
                        acts[j]
                    );
                    let v_j = model.neuron_out(0, j);
                    for (s, v) in sum.iter_mut().zip(v_j) {
                        *s += a_j * v;
                    }
                }
                let diff: Vec<f64> = output.iter().zip(&sum).map(|(a, b)| a - b).collect();
                let denom = o_norm(&output);
                if denom > 1e-12 {
                    let rel = o_norm(&diff) / denom;
                    ensure!(
                        rel < 1e-5,
                        "model {model_i} input {input_i}: relative residual {rel:.3e}"
                    );
                } else {
                    ensure!(
                        o_norm(&diff) < 1e-9,
                        "model {model_i} input {input_i}: near-zero output but \
                         absolute residual {:.3e}",
                        o_norm(&diff)
                    );
                }
            }
        }
        let elapsed = started.elapsed();
        ensure!(
            elapsed.as_secs_f64() < 5.0,
            "decomposition sweep took {elapsed:?} (budget 5 s)"
        );
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 02 — analytic probe gradients match central finite differences, and the
//      training loss never increases.

#[test]
fn a02_probe_gradients_match_finite_differences() {
    criterion(2, "analytic vs FD gradients < 1e-4 rel; loss non-increasing", || {
        let mut rng = SplitMix64::new(0xA02);
        for probe_i in 0..10 {
            let d = 3 + rng.next_below(8) as usize; // 3..=10
            let c = 3usize;
            let n = 12usize;
            let xs: Vec<Vec<f64>> = (0..n).map(|_| rng.gaussian_vec(d)).collect();
            let ys: Vec<usize> = (0..n).map(|i| i % c).collect();
            let mut w = Matrix::zeros(d, c);
            for v in w.data_mut() {
                *v = 0.5 * rng.next_gaussian();
            }
            let b: Vec<f64> = (0..c).map(|_| 0.5 * rng.next_gaussian()).collect();
            let l2 = 1e-3;
            let (_, grad_w, grad_b) = loss_and_grad(&w, &b, &xs, &ys, l2);

            let n_coords = d * c + c;
            let mut checked = 0;
            let mut attempts = 0;
            while checked < 10 {
                attempts += 1;
                ensure!(
                    attempts < 200,
                    "probe {probe_i}: could not find 10 well-scaled gradient coordinates"
                );
                let coord = rng.next_below(n_coords as u64) as usize;
                let analytic = if coord < d * c {
                    grad_w.data()[coord]
                } else {
                    grad_b[coord - d * c]
                };
                // A near-zero entry makes the relative comparison meaningless;
                // redraw (the draw is seeded, so this stays reproducible).
                if analytic.abs() < 1e-3 {
                    continue;
                }
                let eval = |delta: f64| -> f64 {
                    let mut w2 = w.clone();
                    let mut b2 = b.clone();
                    if coord < d * c {
                        w2.data_mut()[coord] += delta;
                    } else {
                        b2[coord - d * c] += delta;
                    }
                    loss_and_grad(&w2, &b2, &xs, &ys, l2).0
                };
                let theta = if coord < d * c { w.data()[coord] } else { b[coord - d * c] };
                let h = 1e-6 * theta.abs().max(1.0);
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (fd - analytic).abs() / analytic.abs();
                ensure!(
                    rel < 1e-4,
                    "probe {probe_i} coord {coord}: analytic {analytic:.6e} vs FD {fd:.6e} \
                     (rel {rel:.3e})"
                );
                checked += 1;
            }
        }

        // Full-batch descent on three separated gaussian clusters: the loss
        // curve must be non-increasing epoch over epoch.
        let mut rng = SplitMix64::new(0xA02 + 1);
        let classes = [GroupLabel::White, GroupLabel::BlackAA, GroupLabel::Asian];
        let mut data = Vec::new();
        for (ci, class) in classes.iter().enumerate() {
            for _ in 0..20 {
                let mut x = rng.gaussian_vec(6);
                x[ci] += 3.0;
                data.push((x, *class));
            }
        }
        let (_, curve) = train_probe_with_curve(&data, &ProbeHyper::default())
            .map_err(|e| format!("training failed: {e}"))?;
        ensure!(curve.len() >= 2, "curve too short ({} epochs)", curve.len());
        for (i, pair) in curve.windows(2).enumerate() {
            ensure!(
                pair[1] <= pair[0] + 1e-12,
                "loss increased at epoch {}: {} -> {}",
                i + 1,
                pair[0],
                pair[1]
            );
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 03 — probes on the shipped separable fixture reach ≥99% accuracy and
//      macro-F1, and training is deterministic across reruns.

fn read_metrics(bundle: &Path, slug: &str) -> Result<ProbeMetrics, String> {
    let path = bundle.join("probe").join(slug).join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|e| format!("read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("parse {}: {e}", path.display()))
}

#[test]
fn a03_fixture_probes_reach_99_percent_and_are_deterministic() {
    criterion(3, "fixture probes ≥99% acc / ≥0.99 macro-F1, reruns identical", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let fix = fixture::write_fixture(dir.path()).map_err(|e| e.to_string())?;
        let out = [dir.path().join("first"), dir.path().join("second")];
        for bundle in &out {
            let config = RunConfig::load(
                &fix.config,
                &Overrides { output_dir: Some(bundle.clone()), ..Default::default() },
            )
            .map_err(|e| e.to_string())?;
            run_probe_cmd(&config).map_err(|e| e.to_string())?;
        }
        for slug in ["direct", "indirect"] {
            let metrics = read_metrics(&out[0], slug)?;
            ensure!(
                metrics.accuracy >= 0.99,
                "{slug} probe accuracy {:.4} < 0.99",
                metrics.accuracy
            );
            ensure!(
                metrics.macro_f1 >= 0.99,
                "{slug} probe macro-F1 {:.4} < 0.99",
                metrics.macro_f1
            );
            for file in ["probe.json", "probe.bin", "metrics.json"] {
                let rel = PathBuf::from("probe").join(slug).join(file);
                let a = fs::read(out[0].join(&rel)).map_err(|e| e.to_string())?;
                let b = fs::read(out[1].join(&rel)).map_err(|e| e.to_string())?;
                ensure!(a == b, "{} differs between identical reruns", rel.display());
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 04 — neuron ranking equals a brute-force cosine sort, ties included.

#[test]
fn a04_neuron_ranking_matches_brute_force_cosine_sort() {
    criterion(4, "score_neurons equals brute-force sort (ties included)", || {
        let spec = SyntheticSpec {
            d_model: 48,
            n_layers: 4,
            n_heads: 4,
            d_mlp: 64,
            seed: 0xA04,
            vocab: neurolens::model::VocabSpec::Anonymous(32),
            attention: vec![AttentionKind::Random { sigma: 0.3 }],
            mlp: MlpKind::Random { sigma: 1.0 },
            ..Default::default()
        };
        let model = generate_synthetic_model(&spec).map_err(|e| e.to_string())?;
        let mut rng = SplitMix64::new(7);
        let direction = rng.gaussian_vec(48);

        let got = score_neurons(&model, &direction, 4).map_err(|e| e.to_string())?;

        // Brute force: own cosine, own sort.
        let dir_norm = o_norm(&direction);
        let mut expected: Vec<(usize, usize, f64)> = Vec::new();
        for layer in 0..4 {
            for index in 0..64 {
                let v = model.neuron_out(layer, index);
                let vn = o_norm(v);
                let score = if vn == 0.0 || dir_norm == 0.0 {
                    0.0
                } else {
                    o_dot(v, &direction) / (vn * dir_norm)
                };
                expected.push((layer, index, score));
            }
        }
        expected.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
        });

        ensure!(got.len() == expected.len(), "length {} vs {}", got.len(), expected.len());
        for (i, (g, e)) in got.iter().zip(&expected).enumerate() {
            ensure!(
                (g.neuron.layer, g.neuron.index) == (e.0, e.1),
                "rank {i}: got ({},{}) expected ({},{})",
                g.neuron.layer,
                g.neuron.index,
                e.0,
                e.1
            );
            ensure!(
                g.score.to_bits() == e.2.to_bits(),
                "rank {i}: score {} vs oracle {} (not bit-equal)",
                g.score,
                e.2
            );
        }

        // Pure-tie model: every neuron dead, every score exactly 0.0 — the
        // ranking must fall back to (layer, index) order.
        let dead = generate_synthetic_model(&SyntheticSpec {
            mlp: MlpKind::Zero,
            seed: 0xA04 + 1,
            ..spec
        })
        .map_err(|e| e.to_string())?;
        let tied = score_neurons(&dead, &direction, 4).map_err(|e| e.to_string())?;
        let mut want = Vec::new();
        for layer in 0..4 {
            for index in 0..64 {
                want.push((layer, index));
            }
        }
        for (i, (g, w)) in tied.iter().zip(&want).enumerate() {
            ensure!(g.score == 0.0, "dead neuron rank {i} has score {}", g.score);
            ensure!(
                (g.neuron.layer, g.neuron.index) == *w,
                "tie order violated at rank {i}: ({},{}) vs ({},{})",
                g.neuron.layer,
                g.neuron.index,
                w.0,
                w.1
            );
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 05 — logit-lens sanity: identity unembedding recovers basis vectors, the
//      zero vector ties in ascending id order, and projection is linear.

fn trivial_model(d: usize, vocab_size: usize, unembed: Matrix) -> ModelBundle {
    let d_mlp = 4;
    ModelBundle {
        config: ModelConfig {
            d_model: d,
            n_layers: 1,
            n_heads: 2,
            d_mlp,
            vocab_size,
            rope_base: 10_000.0,
            norm_epsilon: 1e-5,
        },
        embed: Matrix::zeros(vocab_size, d),
        unembed,
        layers: vec![LayerWeights {
            attn_norm: vec![1.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            mlp_norm: vec![1.0; d],
            w_gate: Matrix::zeros(d, d_mlp),
            w_up: Matrix::zeros(d, d_mlp),
            w_down: Matrix::zeros(d_mlp, d),
        }],
    }
}

#[test]
fn a05_logit_lens_identity_ties_and_linearity() {
    criterion(5, "logit-lens delta/tie/linearity checks", || {
        let d = 8;
        let model = trivial_model(d, d, Matrix::identity(d));

        // Delta cases: e_i projects to token i first, all others tied at 0.0
        // in ascending id order.
        for i in 0..d {
            let mut h = vec![0.0; d];
            h[i] = 1.0;
            let proj = logit_lens(&model, None, &h, d).map_err(|e| e.to_string())?;
            let ids: Vec<usize> = proj.entries.iter().map(|e| e.token_id.as_usize()).collect();
            let mut want = vec![i];
            want.extend((0..d).filter(|j| *j != i));
            ensure!(ids == want, "delta e_{i}: order {ids:?}, expected {want:?}");
            ensure!(
                proj.entries[0].logit == 1.0,
                "delta e_{i}: top logit {} ≠ 1.0",
                proj.entries[0].logit
            );
            for e in &proj.entries[1..] {
                ensure!(e.logit == 0.0, "delta e_{i}: tail logit {} ≠ 0.0", e.logit);
            }
        }

        // Zero vector: every logit is exactly 0.0, ids ascending.
        let proj = logit_lens(&model, None, &vec![0.0; d], d).map_err(|e| e.to_string())?;
        let ids: Vec<usize> = proj.entries.iter().map(|e| e.token_id.as_usize()).collect();
        ensure!(
            ids == (0..d).collect::<Vec<_>>(),
            "zero vector tie order: {ids:?}"
        );

        // Linearity on a random unembedding: L(αh₁+βh₂) = αL(h₁)+βL(h₂).
        let vocab_size = 40;
        let mut rng = SplitMix64::new(0xA05);
        let mut unembed = Matrix::zeros(d, vocab_size);
        for v in unembed.data_mut() {
            *v = rng.next_gaussian();
        }
        let model = trivial_model(d, vocab_size, unembed);
        let h1 = rng.gaussian_vec(d);
        let h2 = rng.gaussian_vec(d);
        let (alpha, beta) = (2.5, -1.25);
        let combo: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| alpha * a + beta * b).collect();
        let full = |h: &[f64]| -> Result<BTreeMap<usize, f64>, String> {
            Ok(logit_lens(&model, None, h, vocab_size)
                .map_err(|e| e.to_string())?
                .entries
                .into_iter()
                .map(|e| (e.token_id.as_usize(), e.logit))
                .collect())
        };
        let (l1, l2, lc) = (full(&h1)?, full(&h2)?, full(&combo)?);
        for id in 0..vocab_size {
            let want = alpha * l1[&id] + beta * l2[&id];
            let got = lc[&id];
            ensure!(
                (got - want).abs() < 1e-6,
                "linearity violated at token {id}: {got} vs {want}"
            );
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 06 — the suppression transform never outputs a positive value and scales
//      by exactly k; suppressing a dead neuron is a bit-level no-op.

#[test]
fn a06_suppression_transform_sign_and_magnitude() {
    criterion(6, "f(a) ≤ 0 and |f(a)| = k·|a| exactly; dead-neuron no-op", || {
        let mut rng = SplitMix64::new(0xA06);
        let factors = [5.0, 10.0, 20.0];
        for i in 0..1000 {
            let a = if i % 97 == 0 { 0.0 } else { (rng.next_f64() * 2.0 - 1.0) * 10.0 };
            let k = factors[rng.next_below(3) as usize];
            let f = InterventionPolicy::transform(k, a);
            ensure!(f <= 0.0, "transform({k}, {a}) = {f} > 0");
            ensure!(
                f.abs().to_bits() == (k * a.abs()).to_bits(),
                "transform({k}, {a}) = {f}: |f| ≠ k·|a| bit-exactly"
            );
        }

        // A model whose MLPs are all zero: every activation is exactly 0, so
        // a suppression policy must not move a single logit bit.
        let spec = SyntheticSpec {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 8,
            seed: 0xA06,
            vocab: neurolens::model::VocabSpec::Anonymous(16),
            attention: vec![AttentionKind::Random { sigma: 0.4 }],
            mlp: MlpKind::Zero,
            ..Default::default()
        };
        let model = generate_synthetic_model(&spec).map_err(|e| e.to_string())?;
        let tokens = [TokenId(3), TokenId(1), TokenId(4), TokenId(15)];
        let plan = CapturePlan::residual_only(0, Pooling::LastInputToken);
        let policy =
            InterventionPolicy::new([NeuronRef { layer: 1, index: 0 }], 20.0);
        let plain = forward(&model, &tokens, &plan, None).map_err(|e| e.to_string())?;
        let suppressed =
            forward(&model, &tokens, &plan, Some(&policy)).map_err(|e| e.to_string())?;
        for (a, b) in plain.final_logits().iter().zip(suppressed.final_logits()) {
            ensure!(
                a.to_bits() == b.to_bits(),
                "dead-neuron suppression changed a logit: {a} vs {b}"
            );
        }
        let gen_a = greedy_generate(&model, &tokens, 4, None).map_err(|e| e.to_string())?;
        let gen_b =
            greedy_generate(&model, &tokens, 4, Some(&policy)).map_err(|e| e.to_string())?;
        ensure!(gen_a == gen_b, "dead-neuron suppression changed a generation");
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 07 — end to end on the planted fixture: the bias neuron drives ≥90% of the
//      planted records into the wrong label, and suppressing the implicated
//      group at k=5 removes that error entirely. Every generation the
//      pipeline reports is replayed here on a from-scratch forward pass.

/// Brute-force decoder forward: full recompute per step, plain loops, no
/// shared code with the engine. Returns final-position logits.
fn oracle_last_logits(
    model: &ModelBundle,
    tokens: &[TokenId],
    targets: &[(usize, usize)],
    factor: f64,
) -> Vec<f64> {
    let cfg = &model.config;
    let (d, n_heads) = (cfg.d_model, cfg.n_heads);
    let head_dim = d / n_heads;
    let n = tokens.len();
    let mut states: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| model.embed.row(t.as_usize()).to_vec())
        .collect();
    for (layer_idx, layer) in model.layers.iter().enumerate() {
        // Attention.
        let normed: Vec<Vec<f64>> = states
            .iter()
            .map(|s| o_rms_norm(s, &layer.attn_norm, cfg.norm_epsilon))
            .collect();
        let mut q = Vec::with_capacity(n);
        let mut key = Vec::with_capacity(n);
        let mut val = Vec::with_capacity(n);
        for (pos, x) in normed.iter().enumerate() {
            let mut qv = o_vec_mat(x, &layer.wq);
            let mut kv = o_vec_mat(x, &layer.wk);
            for h in 0..n_heads {
                for i in 0..head_dim / 2 {
                    let theta = cfg.rope_base.powf(-((2 * i) as f64) / head_dim as f64);
                    let (sin, cos) = ((pos as f64) * theta).sin_cos();
                    for vec in [&mut qv, &mut kv] {
                        let (a, b) = (vec[h * head_dim + 2 * i], vec[h * head_dim + 2 * i + 1]);
                        vec[h * head_dim + 2 * i] = a * cos - b * sin;
                        vec[h * head_dim + 2 * i + 1] = a * sin + b * cos;
                    }
                }
            }
            q.push(qv);
            key.push(kv);
            val.push(o_vec_mat(x, &layer.wv));
        }
        for pos in 0..n {
            let mut mixed = vec![0.0; d];
            for h in 0..n_heads {
                let lo = h * head_dim;
                let hi = lo + head_dim;
                let mut scores: Vec<f64> = (0..=pos)
                    .map(|j| o_dot(&q[pos][lo..hi], &key[j][lo..hi]) / (head_dim as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in scores.iter_mut() {
                    *s /= sum;
                }
                for (j, w) in scores.iter().enumerate() {
                    for k in lo..hi {
                        mixed[k] += w * val[j][k];
                    }
                }
            }
            let projected = o_vec_mat(&mixed, &layer.wo);
            for (s, p) in states[pos].iter_mut().zip(&projected) {
                *s += p;
            }
        }
        // MLP with suppression.
        for state in states.iter_mut() {
            let x = o_rms_norm(state, &layer.mlp_norm, cfg.norm_epsilon);
            let gate = o_vec_mat(&x, &layer.w_gate);
            let up = o_vec_mat(&x, &layer.w_up);
            let mut acts: Vec<f64> =
                gate.iter().zip(&up).map(|(g, u)| o_silu(*g) * u).collect();
            for &(tl, tj) in targets {
                if tl == layer_idx {
                    let a = acts[tj];
                    acts[tj] = if a > 0.0 {
                        -factor * a
                    } else if a < 0.0 {
                        factor * a
                    } else {
                        0.0
                    };
                }
            }
            let written = o_vec_mat(&acts, &layer.w_down);
            for (s, w) in state.iter_mut().zip(&written) {
                *s += w;
            }
        }
    }
    o_vec_mat(states.last().unwrap(), &model.unembed)
}

fn oracle_greedy(
    model: &ModelBundle,
    prompt: &[TokenId],
    max_new: usize,
    targets: &[(usize, usize)],
    factor: f64,
) -> Vec<TokenId> {
    let mut seq = prompt.to_vec();
    let mut new = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let logits = oracle_last_logits(model, &seq, targets, factor);
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        seq.push(TokenId(best as u32));
        new.push(TokenId(best as u32));
    }
    new
}

#[test]
fn a07_planted_bias_is_found_and_removed_end_to_end() {
    criterion(7, "planted bias ≥90% at baseline, 0% after k=5 suppression", || {
        let started = Instant::now();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let fix = fixture::write_fixture(dir.path()).map_err(|e| e.to_string())?;
        let bundle = dir.path().join("bundle");
        let config = RunConfig::load(
            &fix.config,
            &Overrides { output_dir: Some(bundle.clone()), ..Default::default() },
        )
        .map_err(|e| e.to_string())?;
        run_report_cmd(&config).map_err(|e| e.to_string())?;

        // Pipeline-level claims, read back from the artifacts.
        let pattern: neurolens::analysis::ErrorPattern = serde_json::from_str(
            &fs::read_to_string(bundle.join("baseline/error_pattern.json"))
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let planted_errors = pattern
            .pairs
            .iter()
            .find(|p| p.actual == GroupLabel::White && p.predicted == GroupLabel::Asian)
            .map(|p| p.count)
            .unwrap_or(0);
        ensure!(
            planted_errors as f64 >= 0.9 * 15.0,
            "only {planted_errors}/15 planted records misclassified into the planted label"
        );
        let sweep: neurolens::analysis::SweepResult = serde_json::from_str(
            &fs::read_to_string(bundle.join("sweep/sweep.json")).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let cell = sweep
            .cells
            .iter()
            .find(|c| c.kind == neurolens::corpus::Mention::Direct && c.factor == 5.0)
            .ok_or("sweep has no direct k=5 cell")?;
        ensure!(
            cell.original_bias == 0.0,
            "k=5 suppression left original-bias rate {}",
            cell.original_bias
        );
        ensure!(cell.correct >= 0.75, "k=5 correct rate {} < 0.75", cell.correct);

        // Brute-force replay: every planted record, baseline and suppressed,
        // on the from-scratch forward pass above.
        let loaded = load_model(&fix.model_manifest).map_err(|e| e.to_string())?;
        let vocab = loaded.vocab.as_ref().ok_or("fixture model has no vocabulary")?;
        let model = &loaded.model;
        let template = PromptTemplate::creact_default();
        let asian_tok = vocab.lookup(" Asian").ok_or("missing token ' Asian'")?;
        let white_tok = vocab.lookup(" White").ok_or("missing token ' White'")?;

        let groups: Vec<NeuronGroup> = serde_json::from_str(
            &fs::read_to_string(bundle.join("attribution/direct_groups.json"))
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let targets: Vec<(usize, usize)> = groups
            .iter()
            .find(|g| g.group == GroupLabel::Asian)
            .ok_or("no retained Asian group in direct attribution")?
            .refs()
            .iter()
            .map(|r| (r.layer, r.index))
            .collect();
        ensure!(!targets.is_empty(), "retained Asian group is empty");
        let policy = InterventionPolicy::new(
            targets.iter().map(|&(layer, index)| NeuronRef { layer, index }),
            5.0,
        );

        let planted_texts: Vec<String> = fixture::corpus_rows()
            .into_iter()
            .filter(|(_, race, mention)| *race == "white" && *mention == "indirect")
            .map(|(text, _, _)| text)
            .collect();
        ensure!(planted_texts.len() == 15, "expected 15 planted records");

        let mut baseline_biased = 0;
        let mut suppressed_correct = 0;
        for text in &planted_texts {
            let ids = vocab.tokenize(&render_prompt(&template, text)).ids;

            let oracle_base = oracle_greedy(model, &ids, 4, &[], 0.0);
            let engine_base =
                greedy_generate(model, &ids, 4, None).map_err(|e| e.to_string())?;
            ensure!(
                oracle_base == engine_base,
                "baseline generation diverges from the brute-force replay on {text:?}"
            );
            if oracle_base.first() == Some(&asian_tok) {
                baseline_biased += 1;
            }

            let oracle_fix = oracle_greedy(model, &ids, 4, &targets, 5.0);
            let engine_fix =
                greedy_generate(model, &ids, 4, Some(&policy)).map_err(|e| e.to_string())?;
            ensure!(
                oracle_fix == engine_fix,
                "suppressed generation diverges from the brute-force replay on {text:?}"
            );
            ensure!(
                oracle_fix.first() != Some(&asian_tok),
                "suppression left the planted label on {text:?}"
            );
            if oracle_fix.first() == Some(&white_tok) {
                suppressed_correct += 1;
            }
        }
        ensure!(
            baseline_biased as f64 >= 0.9 * 15.0,
            "brute-force replay sees only {baseline_biased}/15 biased baselines"
        );
        ensure!(
            suppressed_correct as f64 >= 0.75 * 15.0,
            "brute-force replay sees only {suppressed_correct}/15 corrected records"
        );

        let elapsed = started.elapsed();
        ensure!(
            elapsed.as_secs_f64() < 60.0,
            "end-to-end run took {elapsed:?} (budget 60 s)"
        );
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 08 — the error-pattern table reproduces the published dominant-error
//      percentages from the published count vectors.

#[test]
fn a08_dominant_error_percentages_match_published_tables() {
    criterion(8, "dominant-error percentages 75.0 / 76.2 / 95.6 (±0.05)", || {
        use GroupLabel::{Asian, BlackAA, White};
        let pair = |actual, predicted, count| ErrorPairCount { actual, predicted, count };
        let cases: [(&str, Vec<ErrorPairCount>, f64); 3] = [
            (
                "first",
                vec![
                    pair(White, Asian, 27),
                    pair(White, BlackAA, 4),
                    pair(BlackAA, White, 4),
                    pair(Asian, White, 1),
                ],
                75.0,
            ),
            (
                "second",
                vec![pair(White, Asian, 4), pair(White, BlackAA, 16), pair(Asian, White, 1)],
                76.2,
            ),
            (
                "third",
                vec![
                    pair(White, Asian, 395),
                    pair(White, BlackAA, 5),
                    pair(BlackAA, Asian, 10),
                    pair(Asian, White, 1),
                    pair(Asian, BlackAA, 2),
                ],
                95.6,
            ),
        ];
        for (name, pairs, published) in cases {
            let pattern = error_pattern_from_counts(pairs, 0);
            let pct = pattern.dominant_pct.ok_or(format!("{name}: no dominant error"))?;
            ensure!(
                (pct - published).abs() <= 0.05,
                "{name}: dominant {pct:.3}% vs published {published}%"
            );
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 09 — the label parser maps the published example outputs exactly.

#[test]
fn a09_label_parser_maps_published_examples() {
    criterion(9, "published outputs parse to White, White, Unknown, Unknown", || {
        let options = PromptTemplate::creact_default().options;
        let cases = [
            ("[White] You are an AI assistant. Provide", Prediction::Label(GroupLabel::White)),
            ("[White] You are an AI assistant. User", Prediction::Label(GroupLabel::White)),
            ("[Russian] The race or ethnicity that best fits", Prediction::Unknown),
            ("[Russian] Based on the information provided in the", Prediction::Unknown),
        ];
        for (text, want) in cases {
            let got = parse_label(text, &options);
            ensure!(got == want, "{text:?} parsed to {got:?}, expected {want:?}");
        }
        // The remaining malformed examples from the same set.
        for text in ["[Yellow] [X] [Black or African", "[Yellow] The provided options do not include \""] {
            let got = parse_label(text, &options);
            ensure!(
                got == Prediction::Unknown,
                "{text:?} parsed to {got:?}, expected Unknown"
            );
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 10 — prompt rendering is byte-exact.

#[test]
fn a10_rendered_prompt_is_byte_identical_to_the_template() {
    criterion(10, "render_prompt output byte-identical for a fixture sentence", || {
        let template = PromptTemplate::creact_default();
        let got = render_prompt(&template, "The patient speaks Russian at home.");
        let want = "Please read the following sentence from a clinical note. Based on the \
                    information contained within the sentence, determine which of the following \
                    races or ethnicities the patient belongs to. Please respond with only one \
                    option.\nOptions: [White, Black or African American, Asian]\nClinical Note: \
                    \"The patient speaks Russian at home.\"\nInferred Race or Ethnicity:";
        ensure!(
            got == want,
            "rendered prompt differs:\n  got: {got:?}\n want: {want:?}"
        );
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 11 — two full runs with the same config produce byte-identical bundles.

fn walk_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), String> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| format!("read_dir {}: {e}", dir.display()))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| e.to_string())?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            walk_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    Ok(())
}

fn copy_tree(from: &Path, to: &Path) -> Result<(), String> {
    let mut files = Vec::new();
    walk_files(from, from, &mut files)?;
    for rel in files {
        let dst = to.join(&rel);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        fs::copy(from.join(&rel), &dst).map_err(|e| e.to_string())?;
    }
    Ok(())
}

#[test]
fn a11_identical_configs_produce_byte_identical_bundles() {
    criterion(11, "two full runs with one config are byte-identical", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let fix = fixture::write_fixture(dir.path()).map_err(|e| e.to_string())?;
        let bundle = dir.path().join("bundle");
        let config = RunConfig::load(
            &fix.config,
            &Overrides { output_dir: Some(bundle.clone()), ..Default::default() },
        )
        .map_err(|e| e.to_string())?;

        run_report_cmd(&config).map_err(|e| e.to_string())?;
        let snapshot = dir.path().join("snapshot");
        copy_tree(&bundle, &snapshot)?;
        run_report_cmd(&config).map_err(|e| e.to_string())?;

        let (mut a, mut b) = (Vec::new(), Vec::new());
        walk_files(&bundle, &bundle, &mut a)?;
        walk_files(&snapshot, &snapshot, &mut b)?;
        ensure!(
            a == b,
            "file sets differ between runs: {} vs {} files",
            a.len(),
            b.len()
        );
        ensure!(!a.is_empty(), "bundle is empty");
        for rel in &a {
            let x = fs::read(bundle.join(rel)).map_err(|e| e.to_string())?;
            let y = fs::read(snapshot.join(rel)).map_err(|e| e.to_string())?;
            ensure!(x == y, "{} differs between identical runs", rel.display());
        }
        Ok(())
    });
}
