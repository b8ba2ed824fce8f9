//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines print directly; exits non-zero when any criterion fails.

mod support;

use std::rc::Rc;
use std::time::Instant;

use mohd::config::{MohdConfig, RunConfig};
use mohd::layers::{attention, count_params, ffn, forced_route, Block, BlockRecord, BlockSpec, ParamKind, ParamStore, RouteSpec};
use mohd::model::Model;
use mohd::numerics::grad_check;
use mohd::router::{self, Component, GateDecision, GateSpec, RouteStats, SubDimLayout};
use mohd::sparsity::{self, Site};
use mohd::training::{held_batches, Checkpoint, Corpus, Trainer};
use mohd::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use support::oracle::{self, BlockWeights, Dims, Rows};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn randn_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, std: f64) -> Rows {
    (0..n)
        .map(|_| (0..d).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn weights_of<'a>(store: &'a ParamStore, block: &Block) -> BlockWeights<'a> {
    let ids = &block.ids;
    let g = |id| store.get(id).data();
    BlockWeights {
        attn_norm: g(ids.attn_norm),
        wq: g(ids.attn.wq),
        wk: g(ids.attn.wk),
        wv: g(ids.attn.wv),
        wo: g(ids.attn.wo),
        ffn_norm: g(ids.ffn_norm),
        w_up: g(ids.ffn.w_up),
        w_gate: g(ids.ffn.w_gate),
        w_down: g(ids.ffn.w_down),
    }
}

fn dims_of(spec: &BlockSpec, seq_len: usize) -> Dims {
    Dims {
        hidden: spec.hidden,
        heads: spec.heads,
        head_dim: spec.head_dim,
        ffn: spec.ffn_dim,
        seq_len,
        eps: spec.norm_eps,
        theta: spec.rope_theta,
    }
}

/// Redraws every tensor of kind Matrix/Centroids with `std`, norms around one.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let kind = store.kind(id);
        for v in store.get_mut(id).data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            match kind {
                ParamKind::Norm => *v = 1.0 + 0.2 * z,
                ParamKind::Fusion => *v += 0.3 * z,
                _ => *v = std * z,
            }
        }
    }
}

fn block_cfg(d: usize, heads: usize, head_dim: usize, ffn: usize) -> MohdConfig {
    let mut cfg = MohdConfig::default();
    cfg.model.d_base = d;
    cfg.model.heads = heads;
    cfg.model.head_dim = head_dim;
    cfg.model.ffn_dim = ffn;
    cfg.model.depth = 1;
    cfg
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut cfg = block_cfg(32, 4, 8, 64);
    cfg.router.attn_subdims = 1;
    cfg.router.ffn_subdims = 1;
    cfg.router.attn_delta = 1.0;
    cfg.router.ffn_delta = 1.0;
    cfg.router.attn_shared = 1.0;
    cfg.router.ffn_shared = 1.0;
    let spec = BlockSpec::from_config(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let block = Block::init(&mut store, &spec, 0, 0.2, &mut rng).map_err(|e| e.to_string())?;
    ensure(block.is_routed(), || "block has no routers".into())?;
    // fusion stays at its identity initialisation
    for id in store.ids().collect::<Vec<_>>() {
        if !matches!(store.kind(id), ParamKind::Fusion) {
            let kind = store.kind(id);
            for v in store.get_mut(id).data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = if kind == ParamKind::Norm { 1.0 + 0.2 * z } else { 0.2 * z };
            }
        }
    }
    let (n, seq) = (8, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = randn_rows(&mut rng, n, 32, 1.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(Tensor::matrix(&x).unwrap());
        let y = block
            .forward(&mut tape, &bound, &spec, xv, seq, &mut BlockRecord::default())
            .map_err(|e| e.to_string())?;
        let want = oracle::vanilla_block(&x, &weights_of(&store, &block), &dims_of(&spec, seq));
        worst = worst.max(max_abs_diff(tape.value(y).data(), &oracle::flat(&want)));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-9, || format!("max abs diff {worst:e}"))?;
    ensure(secs < 1.0, || format!("took {secs:.2}s"))?;
    Ok(format!("max abs diff {worst:.1e} over 20 inputs in {secs:.3}s"))
}

fn random_decision(rng: &mut ChaCha8Rng, n_sub: usize, k: usize, shared: usize) -> GateDecision {
    let mut rest: Vec<usize> = (shared..n_sub).collect();
    rest.shuffle(rng);
    let mut selected: Vec<usize> = (0..shared).chain(rest[..k - shared].iter().copied()).collect();
    selected.sort_unstable();
    let weights: Vec<f64> = selected.iter().map(|_| rng.random_range(0.05..1.0)).collect();
    let scale = k as f64 / weights.iter().sum::<f64>();
    let mut scores_full = vec![0.0; n_sub];
    for (&i, &w) in selected.iter().zip(&weights) {
        scores_full[i] = w;
    }
    GateDecision {
        selected,
        weights,
        scale,
        scores_full,
    }
}

fn divisors(d: usize) -> Vec<usize> {
    (1..=d).filter(|r| d % r == 0).collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = [8, 16, 24, 32][rng.random_range(0..4)];
        let subs: Vec<usize> = divisors(d).into_iter().filter(|&n| n <= 8).collect();
        let n_sub = subs[rng.random_range(0..subs.len())];
        let k = rng.random_range(1..=n_sub);
        let shared = rng.random_range(0..=k);
        let gate = GateSpec::new(n_sub, k as f64 / n_sub as f64, shared as f64 / n_sub as f64).map_err(|e| e.to_string())?;
        let layout = SubDimLayout::new(d, n_sub).map_err(|e| e.to_string())?;
        let rs = divisors(d);
        let fusion_r = rs[rng.random_range(0..rs.len())];
        let route = RouteSpec { gate, layout, fusion_r };
        let spec = BlockSpec {
            hidden: d,
            heads: 2,
            head_dim: 4,
            ffn_dim: 12,
            norm_eps: 1e-5,
            rope_theta: 1e4,
            attn_route: Some(route.clone()),
            ffn_route: Some(route),
        };
        let mut store = ParamStore::new();
        let block = Block::init(&mut store, &spec, 0, 0.3, &mut rng).map_err(|e| e.to_string())?;
        randomize(&mut store, &mut rng, 0.3);
        let (seq, n) = (3, 6);
        let xn = randn_rows(&mut rng, n, d, 1.0);
        let attn_dec: Vec<GateDecision> = (0..n).map(|_| random_decision(&mut rng, n_sub, k, shared)).collect();
        let ffn_dec: Vec<GateDecision> = (0..n).map(|_| random_decision(&mut rng, n_sub, k, shared)).collect();

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(Tensor::matrix(&xn).unwrap());
        let ra = forced_route(&mut tape, &attn_dec, &layout).map_err(|e| e.to_string())?;
        let a = attention(&mut tape, &bound, &block.ids.attn, &spec, xv, Some(&ra), seq).map_err(|e| e.to_string())?;
        let rf = forced_route(&mut tape, &ffn_dec, &layout).map_err(|e| e.to_string())?;
        let f = ffn(&mut tape, &bound, &block.ids.ffn, xv, Some(&rf)).map_err(|e| e.to_string())?;

        let w = weights_of(&store, &block);
        let dims = dims_of(&spec, seq);
        let attn_fusion = oracle::fusion_matrix(store.get(block.ids.attn.router.unwrap().fusion).data(), d, fusion_r);
        let ffn_fusion = oracle::fusion_matrix(store.get(block.ids.ffn.router.unwrap().fusion).data(), d, fusion_r);
        let want_a = oracle::masked_attention(&xn, &w, &dims, &attn_dec, n_sub, &attn_fusion);
        let want_f = oracle::masked_ffn(&xn, &w, &dims, &ffn_dec, n_sub, &ffn_fusion);
        worst = worst
            .max(max_abs_diff(tape.value(a.out).data(), &oracle::flat(&want_a)))
            .max(max_abs_diff(tape.value(f.out).data(), &oracle::flat(&want_f)));
    }
    ensure(worst < 1e-10, || format!("max abs diff {worst:e}"))?;
    Ok(format!("attention and FFN, max abs diff {worst:.1e} over 50 decision sets"))
}

/// Highest-sum subset of size `k` among those containing `0..shared`.
fn brute_force(scores: &[f64], k: usize, shared: usize) -> Vec<usize> {
    let n = scores.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k || (0..shared).any(|i| mask & (1 << i) == 0) {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let total: f64 = set.iter().map(|&i| scores[i]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, set));
        }
    }
    best.unwrap().1
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut shared_ok = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=12);
        let k = rng.random_range(1..=n);
        let shared = rng.random_range(0..=k);
        let gate = GateSpec::new(n, k as f64 / n as f64, shared as f64 / n as f64).map_err(|e| e.to_string())?;
        let logits: Vec<f64> = (0..n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let scores: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let dec = router::select_mixed(&Tensor::vector(scores.clone()).unwrap(), &gate).map_err(|e| e.to_string())?;
        let want = brute_force(&scores, k, shared);
        ensure(dec.selected == want, || format!("trial {trial}: {:?} vs brute force {want:?}", dec.selected))?;
        let weights: Vec<f64> = want.iter().map(|&i| scores[i]).collect();
        ensure(dec.weights == weights, || format!("trial {trial}: gate weights differ"))?;
        let alpha = k as f64 / weights.iter().sum::<f64>();
        ensure((dec.scale - alpha).abs() <= 1e-12 * alpha, || format!("trial {trial}: α {} vs {alpha}", dec.scale))?;
        if (0..shared).all(|i| dec.selected.contains(&i)) {
            shared_ok += 1;
        }
    }
    ensure(shared_ok == 1000, || format!("shared prefix present in {shared_ok}/1000"))?;
    Ok("1000/1000 match brute force; shared indices in 100% of decisions".into())
}

/// Smallest gap between adjacent scores that decide top-k membership or the argmax.
fn routing_gap(scores: &[f64], n_sub: usize, gate: &GateSpec) -> f64 {
    let mut gap = f64::INFINITY;
    for row in scores.chunks(n_sub) {
        let mut all = row.to_vec();
        all.sort_by(|a, b| b.total_cmp(a));
        gap = gap.min(all[0] - all[1]);
        let mut spec = row[gate.n_shared()..].to_vec();
        spec.sort_by(|a, b| b.total_cmp(a));
        let r = gate.n_routed();
        if r > 0 && r < spec.len() {
            gap = gap.min(spec[r - 1] - spec[r]);
        }
    }
    gap
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut cfg = block_cfg(16, 2, 8, 24);
    cfg.router.attn_subdims = 4;
    cfg.router.ffn_subdims = 4;
    cfg.router.attn_delta = 0.75;
    cfg.router.ffn_delta = 0.75;
    cfg.router.attn_shared = 0.25;
    cfg.router.ffn_shared = 0.25;
    let spec = BlockSpec::from_config(&cfg).map_err(|e| e.to_string())?;
    let gate = cfg.attn_gate().map_err(|e| e.to_string())?;
    let (n, seq) = (6, 3);
    let beta = 0.1;

    // search seeds until every routing decision sits clear of a tie
    let mut chosen = None;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = Block::init(&mut store, &spec, 0, 0.3, &mut rng).map_err(|e| e.to_string())?;
        randomize(&mut store, &mut rng, 0.4);
        let x = Tensor::matrix(&randn_rows(&mut rng, n, 16, 1.0)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut rec = BlockRecord::default();
        block.forward(&mut tape, &bound, &spec, xv, seq, &mut rec).map_err(|e| e.to_string())?;
        let gap = rec
            .routes
            .iter()
            .map(|r| routing_gap(tape.value(r.scores.unwrap()).data(), 4, &gate))
            .fold(f64::INFINITY, f64::min);
        if gap > 1e-3 {
            chosen = Some((store, block, x, gap));
            break;
        }
    }
    let (store, block, x, gap) = chosen.ok_or("no seed with routing gaps above 1e-3")?;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let probe = Rc::new((0..n * 16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>());
    let params: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
    let f = |tape: &mut Tape, vars: &[mohd::Var]| -> mohd::Result<mohd::Var> {
        let bound = mohd::layers::Bound::from_vars(vars.to_vec());
        let xv = tape.constant(x.clone());
        let mut rec = BlockRecord::default();
        let y = block.forward(tape, &bound, &spec, xv, seq, &mut rec)?;
        let weighted = tape.mul_const(y, probe.clone())?;
        let mut loss = tape.sum(weighted)?;
        for r in &rec.routes {
            let lb = tape.balance_loss(r.scores.unwrap(), beta)?;
            loss = tape.add(loss, lb)?;
        }
        Ok(loss)
    };
    let report = grad_check(f, &params, 1e-5, 24).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let mut groups = Vec::new();
    for (id, err) in store.ids().zip(&report.per_param) {
        groups.push(format!("{}={err:.1e}", store.name(id).trim_start_matches("layers.0.")));
    }
    let kinds: std::collections::BTreeSet<_> = store.ids().map(|id| format!("{:?}", store.kind(id))).collect();
    ensure(kinds.len() == 4, || format!("parameter groups {kinds:?}"))?;
    ensure(report.coords_checked >= 200, || format!("only {} coordinates", report.coords_checked))?;
    ensure(report.max_rel_err < 1e-3, || format!("max rel err {:e}: {}", report.max_rel_err, groups.join(" ")))?;
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "max rel err {:.1e} over {} coords ({}), min routing gap {gap:.1e}, {secs:.1}s",
        report.max_rel_err,
        report.coords_checked,
        kinds.into_iter().collect::<Vec<_>>().join("/")
    ))
}

fn decisions_for(rows: &[Vec<f64>]) -> Vec<GateDecision> {
    let gate = GateSpec::new(rows[0].len(), 1.0, 0.0).unwrap();
    rows.iter()
        .map(|r| router::select_mixed(&Tensor::vector(r.clone()).unwrap(), &gate).unwrap())
        .collect()
}

fn tape_balance(rows: &[Vec<f64>], beta: f64) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::matrix(rows).unwrap());
    let lb = tape.balance_loss(s, beta).unwrap();
    tape.scalar(lb)
}

fn toy_imbalance(beta: f64) -> Result<f64, String> {
    let mut cfg = support::small_run(true);
    cfg.model.d_base = 32;
    cfg.model.heads = 4;
    cfg.model.head_dim = 8;
    cfg.model.ffn_dim = 64;
    cfg.router.attn_subdims = 8;
    cfg.router.ffn_subdims = 8;
    cfg.router.attn_delta = 0.5;
    cfg.router.ffn_delta = 0.5;
    cfg.router.attn_shared = 0.25;
    cfg.router.ffn_shared = 0.25;
    cfg.router.beta = beta;
    cfg.train.seq_len = 32;
    cfg.train.batch = 8;
    cfg.train.steps = TOY_STEPS;
    cfg.train.eval_interval = TOY_STEPS;
    cfg.train.lr = 3e-3;
    let corpus = Corpus::from_bytes(support::prose(200_000, 5), 0.1, 32).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg.clone(), &corpus).map_err(|e| e.to_string())?;
    trainer.run(None::<std::io::Sink>).map_err(|e| e.to_string())?;
    let mut stats = RouteStats::new();
    for b in held_batches(&corpus.held_out, 32, 16, 64) {
        trainer.model.route_stats(&b.inputs, 32, &mut stats).map_err(|e| e.to_string())?;
    }
    let shared = |_: Component| 2;
    Ok(stats.imbalance_ratio(shared))
}

const TOY_STEPS: usize = 300;
const TOY_BETA: f64 = 0.1;

fn criterion_5() -> Outcome {
    for n in [2usize, 4, 8, 16] {
        let beta = 0.37;
        let uniform = vec![vec![1.0 / n as f64; n]; 10];
        for (name, got) in [
            ("router", router::balance_loss(&decisions_for(&uniform), beta).unwrap()),
            ("tape", tape_balance(&uniform, beta)),
        ] {
            let want = beta / n as f64;
            ensure((got - want).abs() <= 1e-12, || format!("{name} uniform N={n}: {got} vs {want}"))?;
        }
        let mut onehot = vec![0.0; n];
        onehot[n - 1] = 1.0;
        let collapsed = vec![onehot; 10];
        for (name, got) in [
            ("router", router::balance_loss(&decisions_for(&collapsed), beta).unwrap()),
            ("tape", tape_balance(&collapsed, beta)),
        ] {
            ensure((got - beta).abs() <= 1e-12, || format!("{name} collapse N={n}: {got} vs {beta}"))?;
        }
    }
    let with = toy_imbalance(TOY_BETA)?;
    let without = toy_imbalance(0.0)?;
    ensure(with < without, || format!("max/min selection ratio β={TOY_BETA}: {with:.3}, β=0: {without:.3}"))?;
    Ok(format!("closed forms exact; toy max/min ratio β={TOY_BETA}: {with:.3} < β=0: {without:.3}"))
}

/// Matrix entries with a nonzero gradient when every token takes `decision`.
fn touched_matrix_entries(cfg: &MohdConfig, decision_k: usize, shared: usize) -> Result<(usize, usize), String> {
    let model = Model::new(cfg, 3).map_err(|e| e.to_string())?;
    let spec = &model.spec;
    let block = &model.blocks[0];
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let n_sub = spec.attn_route.as_ref().map_or(1, |r| r.gate.n_subdims());
    let (n, seq) = (4, 4);
    let dec = random_decision(&mut rng, n_sub, decision_k, shared);
    let decisions = vec![dec; n];
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let x = tape.constant(Tensor::matrix(&randn_rows(&mut rng, n, spec.hidden, 1.0)).unwrap());
    let mut rec = BlockRecord {
        forced: spec.attn_route.as_ref().map(|_| (decisions.clone(), decisions.clone())),
        ..BlockRecord::default()
    };
    let y = block.forward(&mut tape, &bound, spec, x, seq, &mut rec).map_err(|e| e.to_string())?;
    let probe = Rc::new((0..n * spec.hidden).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>());
    let weighted = tape.mul_const(y, probe).map_err(|e| e.to_string())?;
    let loss = tape.sum(weighted).map_err(|e| e.to_string())?;
    tape.backward(loss).map_err(|e| e.to_string())?;
    let grads = model.store.grads(&tape, &bound);
    let mut touched = 0;
    let mut total = 0;
    for id in model.store.ids() {
        let name = model.store.name(id);
        if name.starts_with("layers.0.") && model.store.kind(id) == ParamKind::Matrix {
            touched += grads[id.index()].iter().filter(|g| **g != 0.0).count();
            total += grads[id.index()].len();
        }
    }
    Ok((touched, total))
}

fn criterion_6() -> Outcome {
    let mut half = block_cfg(64, 4, 16, 128);
    half.router.attn_subdims = 8;
    half.router.ffn_subdims = 8;
    half.router.attn_delta = 0.5;
    half.router.ffn_delta = 0.5;
    half.router.attn_shared = 0.25;
    half.router.ffn_shared = 0.25;
    let (touched, total) = touched_matrix_entries(&half, 4, 2)?;
    ensure(2 * touched == total, || format!("δ=0.5 touched {touched} of {total}"))?;
    let c = count_params(&half).map_err(|e| e.to_string())?;
    ensure(c.matrix_active() == touched && c.matrix() == total, || {
        format!("count_params {} / {} vs enumerated {touched} / {total}", c.matrix_active(), c.matrix())
    })?;

    let mut base = block_cfg(48, 3, 16, 96);
    base.model.mohd = false;
    let (base_touched, base_total) = touched_matrix_entries(&base, 1, 1)?;
    ensure(base_touched == base_total, || "dense baseline has untouched entries".into())?;
    let mut summary = vec![format!("δ=0.5: {touched}/{total}")];
    for k in [2usize, 3] {
        let mut cfg = block_cfg(48, 3, 16, 96);
        cfg.model.expansion = k;
        cfg.router.attn_subdims = 6 * k;
        cfg.router.ffn_subdims = 6 * k;
        cfg.router.attn_delta = 1.0 / k as f64;
        cfg.router.ffn_delta = 1.0 / k as f64;
        cfg.router.attn_shared = 0.5 / k as f64;
        cfg.router.ffn_shared = 0.5 / k as f64;
        let (t, tot) = touched_matrix_entries(&cfg, 6, 3)?;
        ensure(t == base_total, || format!("k={k}: activated {t} vs dense baseline {base_total}"))?;
        let c = count_params(&cfg).map_err(|e| e.to_string())?;
        ensure(c.matrix_active() == t, || format!("k={k}: count_params {} vs enumerated {t}", c.matrix_active()))?;
        summary.push(format!("k={k}: {t}/{tot} = baseline {base_total}"));
    }
    Ok(summary.join(", "))
}

const DESK_STEPS: usize = 2000;
const DESK_SEQ: usize = 64;

fn desk_config(kind: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.depth = 2;
    cfg.router.attn_subdims = 8;
    cfg.router.ffn_subdims = 8;
    match kind {
        "dense" => cfg.model.mohd = false,
        "delta-0.75" => {
            cfg.router.attn_delta = 0.75;
            cfg.router.ffn_delta = 0.75;
            cfg.router.attn_shared = 0.5;
            cfg.router.ffn_shared = 0.5;
        }
        _ => {
            cfg.model.expansion = 2;
            cfg.router.attn_delta = 0.5;
            cfg.router.ffn_delta = 0.5;
            cfg.router.attn_shared = 0.375;
            cfg.router.ffn_shared = 0.375;
        }
    }
    cfg.train.seq_len = DESK_SEQ;
    cfg.train.batch = 16;
    cfg.train.steps = DESK_STEPS;
    cfg.train.eval_interval = DESK_STEPS;
    cfg.train.eval_windows = 256;
    cfg.train.lr = 2e-3;
    cfg.train.seed = 1234;
    cfg
}

fn criterion_7(corpus: &Corpus) -> (Outcome, Option<Model>) {
    match desk_runs(corpus) {
        Ok((out, model)) => (out, Some(model)),
        Err(e) => (Err(e), None),
    }
}

fn desk_runs(corpus: &Corpus) -> Result<(Outcome, Model), String> {
    let start = Instant::now();
    let mut ppl = Vec::new();
    let mut dense = None;
    for kind in ["dense", "delta-0.75", "expansion-2"] {
        let mut trainer = Trainer::new(desk_config(kind), corpus).map_err(|e| e.to_string())?;
        let log = trainer.run(None::<std::io::Sink>).map_err(|e| e.to_string())?;
        let p = log.last().and_then(|m| m.eval_ppl).ok_or("no final evaluation")?;
        ppl.push((kind, p));
        if kind == "dense" {
            dense = Some(trainer.model);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (d, d75, k2) = (ppl[0].1, ppl[1].1, ppl[2].1);
    let line = format!("dense {d:.4}, δ=0.75 {d75:.4} ({:+.1}%), k=2 {k2:.4}, {:.0}s", 100.0 * (d75 / d - 1.0), secs);
    let model = dense.unwrap();
    let mut failures = Vec::new();
    if d75 > 1.10 * d {
        failures.push("(a) δ=0.75 beyond 10% of dense");
    }
    if k2 > d {
        failures.push("(b) k=2 above dense");
    }
    if secs >= 1800.0 {
        failures.push("over 30 min");
    }
    let out = if failures.is_empty() {
        Ok(line)
    } else {
        Err(format!("{}: {line}", failures.join("; ")))
    };
    Ok((out, model))
}

fn criterion_8(model: &Model, corpus: &Corpus) -> Outcome {
    let batch = held_batches(&corpus.held_out, DESK_SEQ, 8, 8).into_iter().next().ok_or("empty held-out split")?;
    let traces = model.traces(&batch.inputs, DESK_SEQ).map_err(|e| e.to_string())?;
    let mut worst_top_half: f64 = 1.0;
    for tr in &traces {
        let (n, d) = tr.values.dims2().unwrap();
        let curve = sparsity::mean_cumulative_curve(&tr.values).map_err(|e| e.to_string())?;
        // independent curve over per-dimension mean squared activations
        let mut mean = vec![0.0; d];
        for row in tr.values.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v * v / n as f64;
            }
        }
        mean.sort_by(|a, b| b.total_cmp(a));
        let z: f64 = mean.iter().sum();
        let mine: Vec<f64> = mean
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc / z)
            })
            .collect();
        let where_ = format!("layer {} {}", tr.layer, tr.site);
        ensure(max_abs_diff(&curve, &mine) < 1e-12, || format!("{where_}: curve differs from oracle"))?;
        for i in 1..d - 1 {
            let second = curve[i + 1] - 2.0 * curve[i] + curve[i - 1];
            ensure(second <= 1e-12, || format!("{where_}: curve not concave at {i}"))?;
        }
        let top_half = curve[d / 2 - 1];
        ensure(top_half > 0.5, || format!("{where_}: top half carries {top_half:.3}"))?;
        worst_top_half = worst_top_half.min(top_half);

        let table = sparsity::shared_activation_table(&tr.values, 0.2, 9).map_err(|e| e.to_string())?;
        let starts = n - 9 + 1;
        let mut prev = f64::INFINITY;
        for (w, mean) in table {
            let direct: f64 = (0..starts)
                .map(|s| {
                    let rows = Tensor::new(&[w, d], tr.values.data()[s * d..(s + w) * d].to_vec()).unwrap();
                    sparsity::shared_activation_count(&rows, 0.2).unwrap() as f64
                })
                .sum::<f64>()
                / starts as f64;
            ensure((direct - mean).abs() < 1e-12, || format!("{where_}: w={w} table {mean} vs direct {direct}"))?;
            ensure(mean <= prev, || format!("{where_}: shared count rises at w={w}"))?;
            prev = mean;
        }
    }
    // reported, not gated: the criterion does not cover the flow comparison
    let flow = sparsity::activation_flow(&traces).map_err(|e| e.to_string())?;
    let ffn_std = sparsity::flow_spread(&flow, Site::FfnDownOut);
    let attn_std = sparsity::flow_spread(&flow, Site::AttnOOut);
    Ok(format!(
        "{} (layer, site) traces concave, min top-50% share {worst_top_half:.3}; shared counts nonincreasing w=2..9; \
         flow std across layers ffn-down-out {ffn_std:.2} vs attn-o-out {attn_std:.2}",
        traces.len()
    ))
}

fn criterion_9() -> Outcome {
    let corpus = Corpus::from_bytes(support::prose(60_000, 9), 0.1, 16).map_err(|e| e.to_string())?;
    let mut cfg = support::small_run(true);
    cfg.train.steps = 110;
    cfg.train.eval_interval = 1000;
    let mut uninterrupted = Trainer::new(cfg.clone(), &corpus).map_err(|e| e.to_string())?;
    let mut resumed_src = Trainer::new(cfg, &corpus).map_err(|e| e.to_string())?;
    for _ in 0..100 {
        uninterrupted.step_once().map_err(|e| e.to_string())?;
        resumed_src.step_once().map_err(|e| e.to_string())?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("step100.ckpt");
    resumed_src.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;

    let ids: Vec<usize> = corpus.held_out[..32].iter().map(|&b| b as usize).collect();
    let before = resumed_src.model.logits(&ids, 16).map_err(|e| e.to_string())?;
    let after = loaded.model().map_err(|e| e.to_string())?.logits(&ids, 16).map_err(|e| e.to_string())?;
    let bit_exact = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(bit_exact, || "reloaded logits differ".into())?;

    let mut resumed = Trainer::resume(&loaded, &corpus).map_err(|e| e.to_string())?;
    let a = uninterrupted.step_once().map_err(|e| e.to_string())?;
    let b = resumed.step_once().map_err(|e| e.to_string())?;
    let diff = (a.ce - b.ce).abs().max((a.balance - b.balance).abs());
    ensure(a.step == 101 && b.step == 101, || format!("next steps {} / {}", a.step, b.step))?;
    ensure(diff <= 1e-10, || format!("step-101 loss differs by {diff:e}"))?;
    Ok(format!("logits bit-exact after reload; step-101 loss diff {diff:.1e}"))
}

/// Runs every criterion, or only those whose numbers are passed as arguments
/// (`cargo test --test acceptance -- 3 4`).
fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let mut failed = 0;
    let mut report = |n: usize, out: Outcome| match out {
        Ok(msg) => println!("criterion {n}: PASS  {msg}"),
        Err(msg) => {
            failed += 1;
            println!("criterion {n}: FAIL  {msg}");
        }
    };
    let quick: [(usize, fn() -> Outcome); 6] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
    ];
    for (n, f) in quick {
        if wanted(n) {
            report(n, f());
        }
    }
    if wanted(7) || wanted(8) {
        let corpus = Corpus::from_bytes(support::prose(5_000_000, 7), 0.1, DESK_SEQ).expect("desk corpus");
        let (out, dense) = criterion_7(&corpus);
        if wanted(7) {
            report(7, out);
        }
        if wanted(8) {
            report(
                8,
                dense.map_or_else(|| Err("dense model did not train".into()), |m| criterion_8(&m, &corpus)),
            );
        }
    }
    if wanted(9) {
        report(9, criterion_9());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
