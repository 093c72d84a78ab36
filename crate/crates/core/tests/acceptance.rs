//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use consum::autodiff::{finite_difference_grad, relative_error, Tape, Tensor};
use consum::cli::{self, RunConfig};
use consum::data::{synth_corpus, ExamplePair, SynthSpec, TokenId, TokenSequence, BOS, EOS};
use consum::decoding::{beam_search, exhaustive_search, score_sequence, DecodeConfig};
use consum::losses::{contrastive_loss, contrastive_loss_on, nll_loss, nll_loss_on};
use consum::model::{is_trainable_param, ModelConfig, Seq2SeqModel};
use consum::rouge::{lcs_len, mean_scores, rouge_l, score_texts, Prf};
use consum::training::{
    self, draw_replacements, hinge_report, pair_gradients, pair_scores, record_validation, Decision, Mode, PairOptions,
    TrainData, TrainState, TrainingConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn tiny_config(vocab: usize, d_model: usize, max_doc_len: usize, max_sum_len: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 2 * d_model,
        max_doc_len,
        max_sum_len,
        dropout_rate: dropout,
    }
}

fn random_words(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(3..vocab as TokenId)).collect()
}

fn random_pair(rng: &mut ChaCha8Rng, vocab: usize, max_doc: usize, max_words: usize) -> ExamplePair {
    let doc_len = rng.gen_range(1..=max_doc);
    let sum_len = rng.gen_range(1..=max_words);
    let mut summary = vec![BOS];
    summary.extend(random_words(rng, vocab, sum_len));
    summary.push(EOS);
    ExamplePair {
        document: TokenSequence::new(random_words(rng, vocab, doc_len)),
        summary: TokenSequence::new(summary),
    }
}

fn beam_matches_exhaustive() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..50 {
        let vocab = rng.gen_range(4..=6);
        let max_len = rng.gen_range(2..=5);
        let beta = rng.gen_range(0.0..2.0);
        let model = Seq2SeqModel::new(tiny_config(vocab, 8, 6, max_len, 0.0), 1000 + case).unwrap();
        let len = rng.gen_range(1..=6);
        let enc = model.encode(&TokenSequence::new(random_words(&mut rng, vocab, len)), None).unwrap();
        let cfg = DecodeConfig { beam_size: vocab.pow(max_len as u32), length_penalty_beta: beta, max_len };
        let b = beam_search(&model, &enc, &cfg).unwrap();
        let e = exhaustive_search(&model, &enc, &cfg).unwrap();
        ensure!(b[0].tokens == e[0].tokens, "case {case}: beam {} vs exhaustive {}", b[0].tokens, e[0].tokens);
        ensure!((b[0].score - e[0].score).abs() <= 1e-12, "case {case}: scores {} vs {}", b[0].score, e[0].score);
    }
    Ok("50 models agree on top-1 sequence and score".into())
}

fn nll_is_negated_loglik_sum() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..100u64 {
        let vocab = rng.gen_range(5..=12);
        let model = Seq2SeqModel::new(tiny_config(vocab, 8, 8, 6, 0.0), 2000 + case).unwrap();
        let pair = random_pair(&mut rng, vocab, 8, 5);
        let enc = model.encode(&pair.document, None).unwrap();
        let ll = model.sequence_loglik(&enc, &pair.summary).unwrap();
        let mut sum = 0.0;
        for v in &ll {
            sum += v;
        }
        let expected = -sum;
        let plain = nll_loss(&ll).unwrap();
        ensure!(plain.to_bits() == expected.to_bits(), "case {case}: {plain} vs {expected}");

        let mut tape = Tape::new();
        let b = model.bind(&mut tape, |_| false);
        let e = model.encode_on(&mut tape, &b, pair.document.ids(), None).unwrap();
        let ll_var = model.sequence_loglik_on(&mut tape, &b, e, &pair.summary, None).unwrap();
        let on_tape = nll_loss_on(&mut tape, ll_var).unwrap();
        let on_tape = tape.value(on_tape).item();
        ensure!(on_tape.to_bits() == expected.to_bits(), "case {case}: tape {on_tape} vs {expected}");
    }
    Ok("100 cases bit-exact (plain and tape forms)".into())
}

fn contrastive_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut triples: Vec<(f64, f64, f64)> = vec![
        (-1.0, -1.0, 0.0),
        (-1.0, -1.0, 1.5),
        (-1.0, -2.5, 1.5),
        (-2.5, -1.0, 0.0),
        (0.0, 0.0, 0.0),
        (-3.0, -4.0, 1.0),
        (-0.5, -0.5, 2.0),
        (-10.0, -0.25, 0.5),
    ];
    while triples.len() < 1000 {
        let pos = rng.gen_range(-20.0..0.0);
        let neg = rng.gen_range(-20.0..0.0);
        let gamma = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..3.0) };
        triples.push((pos, neg, gamma));
    }
    for &(pos, neg, gamma) in &triples {
        let expected = (neg - pos + gamma).max(0.0);
        let got = contrastive_loss(pos, neg, gamma).unwrap();
        ensure!((got - expected).abs() <= 1e-12, "({pos}, {neg}, {gamma}): {got} vs {expected}");
    }

    // Flat region: gold already beats the alternative by more than the margin.
    let vocab = 8;
    let model = Seq2SeqModel::new(tiny_config(vocab, 8, 6, 4, 0.0), 31).unwrap();
    let doc = TokenSequence::new(vec![3, 4, 5, 6]);
    let a = TokenSequence::new(vec![BOS, 3, 4, EOS]);
    let b = TokenSequence::new(vec![BOS, 5, 6, 7, EOS]);
    let enc = model.encode(&doc, None).unwrap();
    let (sa, sb) = pair_scores(&model, &enc, &a, &b, 0.8).unwrap();
    let (gold, other, gap) = if sa > sb { (&a, &b, sa - sb) } else { (&b, &a, sb - sa) };
    let gamma = gap / 2.0;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_| true);
    let e = model.encode_on(&mut tape, &bound, doc.ids(), None).unwrap();
    let mut score = |t: &TokenSequence| {
        let ll = model.sequence_loglik_on(&mut tape, &bound, e, t, None).unwrap();
        let s = tape.sum(ll).unwrap();
        tape.scale(s, consum::decoding::inverse_length_penalty(t.len() - 1, 0.8)).unwrap()
    };
    let pos = score(gold);
    let neg = score(other);
    let con = contrastive_loss_on(&mut tape, pos, neg, gamma).unwrap();
    ensure!(tape.value(con).item() == 0.0, "hinge not flat: {}", tape.value(con).item());
    tape.backward(con).unwrap();
    let mut checked = 0;
    for &v in &bound.vars {
        if let Some(g) = tape.grad(v) {
            ensure!(g.iter().all(|&x| x == 0.0), "non-zero gradient in the flat region");
            checked += g.len();
        }
    }
    ensure!(checked > 0, "no parameter gradients were produced");
    Ok(format!("{} triples within 1e-12; {checked} parameter gradients exactly zero in the flat region", triples.len()))
}

fn max_gradient_error(
    model: &Seq2SeqModel,
    pair: &ExamplePair,
    silver: Option<&TokenSequence>,
    opts: &PairOptions,
) -> f64 {
    let analytic = pair_gradients(model, |_| true, pair, None, silver, opts).unwrap().grads;
    let names: Vec<String> = model.param_names().to_vec();
    let cfg = model.config().clone();
    let mut params = model.params().to_vec();
    let numeric = finite_difference_grad(
        |ps: &[Tensor]| {
            let m =
                Seq2SeqModel::from_named(cfg.clone(), names.iter().cloned().zip(ps.iter().cloned()).collect()).unwrap();
            pair_gradients(&m, |_| false, pair, None, silver, opts).unwrap().breakdown.total
        },
        &mut params,
        1e-5,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for ((a, n), name) in analytic.iter().zip(&numeric).zip(&names) {
        if !is_trainable_param(name) {
            continue;
        }
        // A parameter with no path to the loss must have a zero numeric gradient too.
        let zeros = vec![0.0; n.len()];
        let a = a.as_deref().unwrap_or(&zeros);
        for (&x, &y) in a.iter().zip(n) {
            worst = worst.max(relative_error(x, y));
        }
    }
    worst
}

fn gradients_match_finite_differences() -> Outcome {
    let vocab = 8;
    let model = Seq2SeqModel::new(tiny_config(vocab, 8, 6, 5, 0.0), 404).unwrap();
    let pair = ExamplePair {
        document: TokenSequence::new(vec![3, 4, 5, 6, 7]),
        summary: TokenSequence::new(vec![BOS, 4, 6, EOS]),
    };
    let nll_only = PairOptions { gamma: 0.0, beta: 0.8, lambda_nll: 1.0, dropout_seed: None };
    let e_nll = max_gradient_error(&model, &pair, None, &nll_only);

    let silver = TokenSequence::new(vec![BOS, 7, 3, 5, EOS]);
    let enc = model.encode(&pair.document, None).unwrap();
    let (pos, neg) = pair_scores(&model, &enc, &pair.summary, &silver, 0.8).unwrap();
    let gamma = (pos - neg).max(0.0) + 0.25;
    let slack = neg - pos + gamma;
    ensure!(slack > 1e-3, "hinge slack {slack}");
    let combined = PairOptions { gamma, ..nll_only };
    let e_con = max_gradient_error(&model, &pair, Some(&silver), &combined);
    ensure!(e_nll <= 1e-4, "L_nll max relative error {e_nll:.3e}");
    ensure!(e_con <= 1e-4, "L_con + L_nll max relative error {e_con:.3e}");
    let fixed = model.param("pos_enc").map_or(0, Tensor::len);
    Ok(format!(
        "{} trainable scalars; max relative error {e_nll:.2e} (nll), {e_con:.2e} (con + nll, slack {slack:.3})",
        model.num_scalars() - fixed
    ))
}

fn shared_encoding_is_exact() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for case in 0..20u64 {
        let vocab = 10;
        let model = Seq2SeqModel::new(tiny_config(vocab, 8, 8, 6, 0.3), 5000 + case).unwrap();
        let pair = random_pair(&mut rng, vocab, 8, 5);
        let silver = random_pair(&mut rng, vocab, 8, 5).summary;
        let shared = model.encode(&pair.document, None).unwrap();
        let (pos, neg) = pair_scores(&model, &shared, &pair.summary, &silver, 0.8).unwrap();
        let fresh = |t: &TokenSequence| {
            let enc = model.encode(&pair.document, None).unwrap();
            score_sequence(&model.sequence_loglik(&enc, t).unwrap(), 0.8).unwrap()
        };
        ensure!(pos.to_bits() == fresh(&pair.summary).to_bits(), "case {case}: pos differs");
        ensure!(neg.to_bits() == fresh(&silver).to_bits(), "case {case}: neg differs");
        if silver != pair.summary {
            let opts = PairOptions { gamma: 1.0, beta: 0.8, lambda_nll: 1.0, dropout_seed: None };
            let o = pair_gradients(&model, |_| true, &pair, None, Some(&silver), &opts).unwrap();
            ensure!(o.breakdown.pos_score.to_bits() == pos.to_bits(), "case {case}: training pos differs");
            ensure!(o.breakdown.neg_score.to_bits() == neg.to_bits(), "case {case}: training neg differs");
        }
    }
    Ok("20 cases bit-exact, inference and training paths".into())
}

fn small_synthetic() -> (SynthSpec, ModelConfig) {
    let spec =
        SynthSpec { seed: 3, n_train: 24, n_val: 6, n_test: 6, doc_len_min: 4, doc_len_max: 6, salient_count: 2 };
    let vocab = consum::data::synth_vocab().len();
    (spec, tiny_config(vocab, 8, 8, 3, 0.1))
}

fn scheduled_sampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let draws = draw_replacements(&mut rng, 0.5, 1000);
    let rate = draws.iter().filter(|&&d| d).count() as f64 / draws.len() as f64;
    ensure!((0.45..=0.55).contains(&rate), "replacement rate {rate}");

    let (spec, mc) = small_synthetic();
    let corpus = synth_corpus(&spec).unwrap();
    let data = TrainData { train: &corpus.train, val: &corpus.val, vocab: &corpus.vocab };
    let base =
        TrainingConfig { max_epochs: 2, batch_size: 4, val_frequency: 0.5, val_samples: 4, ..Default::default() };
    let run = |mode: Mode| {
        let cfg = TrainingConfig { mode, ss_prob: 0.0, ..base.clone() };
        training::train(Seq2SeqModel::new(mc.clone(), 9).unwrap(), data, &cfg).unwrap()
    };
    let reference = run(Mode::NllOnly);
    for mode in [Mode::SsToken, Mode::SsSum] {
        let ss = run(mode);
        let same = reference
            .model
            .params()
            .iter()
            .zip(ss.model.params())
            .all(|(a, b)| a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        ensure!(same, "{} with ss_prob = 0 diverges from nll_only", mode.as_str());
        ensure!(reference.metrics == ss.metrics, "{} metrics differ from nll_only", mode.as_str());
    }
    Ok(format!("replacement rate {rate:.3} over 1000 draws; ss_prob = 0 bit-identical to nll_only (dropout on)"))
}

fn early_stopping_restores_best() -> Outcome {
    let (_, mc) = small_synthetic();
    let model = Seq2SeqModel::new(mc, 7).unwrap();
    let cfg = TrainingConfig { patience: 4, ..Default::default() };
    let mut state = TrainState::new(model, cfg, 100, 2).unwrap();
    let script = [0.10, 0.20, 0.15, 0.18, 0.20, 0.19, 0.30];
    let mut snapshots = Vec::new();
    let mut stopped_at = None;
    for (i, &r2) in script.iter().enumerate() {
        state.model.params_mut()[0].values_mut()[0] = i as f64;
        snapshots.push(state.model.params().to_vec());
        if record_validation(&mut state, r2) == Decision::Stop {
            stopped_at = Some(i);
            break;
        }
    }
    ensure!(stopped_at == Some(5), "stopped at observation {stopped_at:?}, expected the 4th non-improvement (index 5)");
    ensure!(state.model.params() == snapshots[1].as_slice(), "parameters were not restored to the best validation");
    Ok("stop at the 4th consecutive non-improvement; best snapshot restored".into())
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn desk_scale_direction() -> Outcome {
    let base = RunConfig::load(&configs_dir().join("synthetic-fast.json")).map_err(|e| e.to_string())?;
    let cli::DataSource::Synthetic(spec) = &base.data else { return Err("preset is not synthetic".into()) };
    ensure!(spec.n_train == 2000, "preset n_train {}", spec.n_train);
    let data = cli::load_dataset(&base).unwrap();
    let mut resolved = base.clone();
    resolved.model = cli::resolve_model_config(&base.model, &data.vocab).unwrap();
    let warm = cli::compute_warm_start(&resolved, &data).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let run = |mode: Mode| {
        let mut cfg = base.clone();
        cfg.training.mode = mode;
        cli::train_into(&cfg, &data, &tmp.path().join(mode.as_str()), false, Some(&warm)).unwrap()
    };
    let consum_run = run(Mode::Consum);
    let nll_run = run(Mode::NllOnly);
    let decode = base.decode_config();
    let r2 = |m: &Seq2SeqModel| cli::evaluate(m, &data.test, &data.vocab, &decode).unwrap().corpus.r2.f1;
    let (r2_con, r2_nll) = (r2(&consum_run.model), r2(&nll_run.model));
    let gamma = base.training.gamma;
    let h = hinge_report(&consum_run.model, &data.train, &decode, gamma).unwrap();
    let detail = format!(
        "test R2 consum {r2_con:.4} vs nll_only {r2_nll:.4}; hinge satisfied on {:.3} of {} training pairs \
         (strict pos >= neg + {gamma}: {:.3}; silver == gold: {:.3})",
        h.satisfied_rate(),
        h.pairs,
        h.strict_rate(),
        h.exact_match_rate()
    );
    ensure!(r2_con >= r2_nll - 0.005, "{detail}");
    ensure!(h.satisfied_rate() >= 0.9, "{detail}");
    Ok(detail)
}

fn tiny_run_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "model": {"d_model": 16, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1, "d_ff": 32,
                  "max_doc_len": 8, "max_sum_len": 3, "dropout_rate": 0.1},
        "training": {"batch_size": 8, "max_epochs": 2, "val_frequency": 0.5, "val_samples": 8,
                     "warm_start_epochs": 2, "warm_start_lr": 0.003, "learning_rate": 0.001, "seed": 11},
        "data": {"kind": "synthetic", "seed": 5, "n_train": 48, "n_val": 12, "n_test": 12,
                 "doc_len_min": 4, "doc_len_max": 6, "salient_count": 2}
    });
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn consum_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_consum")).args(args).env("RUST_LOG", "warn").output().unwrap();
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("consum {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Relative path -> bytes for every file under `dir`, skipping the frozen run configs
/// (they record the output directory).
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != cli::RUN_CONFIG_FILE {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn margin_sweep_protocol() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    consum_bin(&["sweep-margin", "--config", cfg, "--out", a.to_str().unwrap()])?;
    consum_bin(&["sweep-margin", "--config", cfg, "--out", b.to_str().unwrap()])?;
    let mut reader = csv::Reader::from_path(a.join("sweep.csv")).unwrap();
    let gammas: Vec<f64> =
        reader.deserialize::<BTreeMap<String, String>>().map(|r| r.unwrap()["gamma"].parse().unwrap()).collect();
    ensure!(gammas == vec![0.0, 0.5, 1.0, 1.5, 2.0], "sweep rows have gammas {gammas:?}");
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    ensure!(sa.keys().eq(sb.keys()), "the two sweeps wrote different files");
    for (path, bytes) in &sa {
        ensure!(&sb[path] == bytes, "{} differs between identical sweeps", path.display());
    }
    Ok(format!("5 rows; {} output files byte-identical across two sweeps", sa.len()))
}

fn prf_close(got: Prf, p: f64, r: f64, f: f64) -> bool {
    (got.precision - p).abs() <= 1e-9 && (got.recall - r).abs() <= 1e-9 && (got.f1 - f).abs() <= 1e-9
}

fn brute_force_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_subsequence = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|c| it.any(|d| d == c))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        if sub.len() > best && is_subsequence(&sub) {
            best = sub.len();
        }
    }
    best
}

fn rouge_fixtures() -> Outcome {
    let third = 1.0 / 3.0;
    // (candidate, reference, R1, R2, RL) with each score as [P, R, F].
    type Fixture<'a> = (&'a str, &'a str, [f64; 3], [f64; 3], [f64; 3]);
    let fixtures: [Fixture; 5] = [
        ("a b c", "a b d", [2.0 * third; 3], [0.5; 3], [2.0 * third; 3]),
        ("a c b", "a b c", [1.0; 3], [0.0; 3], [2.0 * third; 3]),
        (
            "the cat sat",
            "the cat sat on the mat",
            [1.0, 0.5, 2.0 * third],
            [1.0, 0.4, 4.0 / 7.0],
            [1.0, 0.5, 2.0 * third],
        ),
        ("the the the", "the cat", [third, 0.5, 0.4], [0.0; 3], [third, 0.5, 0.4]),
        ("Hello, world!", "hello world", [0.5, 1.0, 2.0 * third], [0.0; 3], [0.5, 1.0, 2.0 * third]),
    ];
    let mut scores = Vec::new();
    for (cand, reference, r1, r2, rl) in fixtures {
        let s = score_texts(cand, reference);
        ensure!(prf_close(s.r1, r1[0], r1[1], r1[2]), "{cand:?}/{reference:?} R1 {:?}", s.r1);
        ensure!(prf_close(s.r2, r2[0], r2[1], r2[2]), "{cand:?}/{reference:?} R2 {:?}", s.r2);
        ensure!(prf_close(s.rl, rl[0], rl[1], rl[2]), "{cand:?}/{reference:?} RL {:?}", s.rl);
        scores.push(s);
    }
    let corpus = mean_scores(&scores);
    ensure!((corpus.r1.f1 - 0.68).abs() <= 1e-9, "corpus R1 F {}", corpus.r1.f1);
    ensure!((corpus.r1.precision - 0.7).abs() <= 1e-9, "corpus R1 P {}", corpus.r1.precision);
    ensure!((corpus.r1.recall - 11.0 / 15.0).abs() <= 1e-9, "corpus R1 R {}", corpus.r1.recall);
    ensure!((corpus.r2.f1 - 3.0 / 14.0).abs() <= 1e-9, "corpus R2 F {}", corpus.r2.f1);
    ensure!((corpus.rl.f1 - 46.0 / 75.0).abs() <= 1e-9, "corpus RL F {}", corpus.rl.f1);

    // Every sequence of length <= 10 over {a, b, c}, each against a fixed
    // reference set plus its own reversal.
    let mut all: Vec<Vec<u8>> = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..10 {
        frontier =
            frontier.iter().flat_map(|s: &Vec<u8>| (b'a'..=b'c').map(move |c| [s.as_slice(), &[c]].concat())).collect();
        all.extend(frontier.iter().cloned());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let references: Vec<Vec<u8>> =
        (0..3).map(|_| (0..rng.gen_range(1..=10)).map(|_| b'a' + rng.gen_range(0..3u8)).collect()).collect();
    let words = |s: &[u8]| s.iter().map(|&c| (c as char).to_string()).collect::<Vec<_>>();
    let mut checked = 0usize;
    for cand in &all {
        let reversed: Vec<u8> = cand.iter().rev().copied().collect();
        for reference in references.iter().chain(std::iter::once(&reversed)) {
            let expected = brute_force_lcs(cand, reference);
            ensure!(lcs_len(cand, reference) == expected, "lcs({cand:?}, {reference:?})");
            let got = rouge_l(&words(cand), &words(reference));
            let want = if cand.is_empty() || reference.is_empty() {
                Prf::default()
            } else {
                Prf::from_pr(expected as f64 / cand.len() as f64, expected as f64 / reference.len() as f64)
            };
            ensure!(got == want, "rouge_l({cand:?}, {reference:?}) = {got:?}, expected {want:?}");
            checked += 1;
        }
    }
    Ok(format!("5 fixtures and corpus means within 1e-9; rouge_l agrees with brute-force LCS on {checked} pairs ({} sequences)", all.len()))
}

fn train_is_reproducible() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    consum_bin(&["train", "--config", cfg, "--out", a.to_str().unwrap()])?;
    consum_bin(&["train", "--config", cfg, "--out", b.to_str().unwrap()])?;
    let files = [cli::CHECKPOINT_FILE, "checkpoint.opt.bin", cli::METRICS_FILE];
    for f in files {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        ensure!(!x.is_empty() && x == y, "{f} differs between identical runs");
    }
    Ok(format!("{} byte-identical across two runs (dropout on)", files.join(", ")))
}

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let criteria: [Criterion; 11] = [
        ("beam search equals exhaustive search", beam_matches_exhaustive),
        ("nll equals negated log-likelihood sum", nll_is_negated_loglik_sum),
        ("margin loss algebra and flat-region gradients", contrastive_algebra),
        ("analytic gradients match finite differences", gradients_match_finite_differences),
        ("shared encoder output gives identical scores", shared_encoding_is_exact),
        ("scheduled sampling rate and ss_prob = 0", scheduled_sampling),
        ("early stopping with patience 4", early_stopping_restores_best),
        ("desk-scale consum vs nll_only", desk_scale_direction),
        ("margin sweep protocol", margin_sweep_protocol),
        ("ROUGE fixtures and LCS oracle", rouge_fixtures),
        ("training reproducibility", train_is_reproducible),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS [{secs:.1}s] {name}: {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("criterion {:>2} FAIL [{secs:.1}s] {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
