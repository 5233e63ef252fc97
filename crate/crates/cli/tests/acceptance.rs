//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ilr_cli::{run_pipeline, ExperimentConfig, Profile};
use ilr_core::calibration::{apply_correction, fit_smearing_factor};
use ilr_core::dataset::{assign_splits, build_observations, Split, SplitBoundaries};
use ilr_core::evaluation::{
    m1_vs_m2, male, msle, ocl_err, MetricsReport, PredictionRow, PredictionSet, Weighting,
};
use ilr_core::features::{EncodedObservation, Variant};
use ilr_core::nn::gradcheck::{
    analytic_gradient, numerical_gradient, relative_error, DEFAULT_STEP,
};
use ilr_core::nn::model::{Layout, Slot};
use ilr_core::nn::ops::{lstm_cell_forward, LstmGateParams, Matrix};
use ilr_core::nn::{InputShape, Model, ModelSpec, RecurrentCell};
use ilr_core::rng::{stream, LabRng};
use ilr_core::simulator::{
    simulate_portfolio, ClaimRecord, Covariates, SimulationConfig, TransactionEvent, TxnKind,
};
use ilr_core::tuning::{enumerate_grid, GridSpace};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(rng: &mut LabRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

// gradient fidelity

fn random_batch(spec: &ModelSpec, n: usize, rng: &mut LabRng) -> Vec<EncodedObservation> {
    (0..n)
        .map(|_| {
            let len = if spec.recurrent_layers > 0 {
                rng.random_range(1..=4)
            } else {
                0
            };
            EncodedObservation {
                statics: (0..spec.inputs.statics)
                    .map(|_| uniform(rng, -1.5, 1.5))
                    .collect(),
                categories: spec
                    .inputs
                    .category_levels
                    .iter()
                    .map(|l| rng.random_range(0..*l))
                    .collect(),
                sequence: (0..len)
                    .map(|_| {
                        (0..spec.inputs.sequence_channels)
                            .map(|_| uniform(rng, -1.5, 1.5))
                            .collect()
                    })
                    .collect(),
                target: uniform(rng, -2.0, 2.0),
            }
        })
        .collect()
}

fn slot_indices(slots: &[Slot]) -> Vec<usize> {
    slots.iter().flat_map(|s| s.range()).collect()
}

/// Worst relative error over the selected parameters across `instances`
/// seeded models and batches.
fn gradient_error(
    spec: &ModelSpec,
    select: impl Fn(&Layout) -> Vec<usize>,
    instances: u64,
) -> Result<(f64, usize), String> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..instances {
        let mut model = Model::new(spec.clone(), 1000 + seed).map_err(|e| e.to_string())?;
        let mut rng = stream(77, seed);
        for p in model.params.iter_mut() {
            *p = uniform(&mut rng, -0.8, 0.8);
        }
        let data = random_batch(spec, 4, &mut rng);
        let batch: Vec<&EncodedObservation> = data.iter().collect();
        let a = analytic_gradient(&model, &batch).map_err(|e| e.to_string())?;
        let n = numerical_gradient(&model, &batch, DEFAULT_STEP).map_err(|e| e.to_string())?;
        let idx = select(&model.layout);
        if idx.is_empty() {
            return Err("no parameters selected".into());
        }
        for k in idx {
            worst = worst.max(relative_error(a[k], n[k]));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn feed_forward_spec(levels: Vec<usize>, batch_norm: bool) -> ModelSpec {
    let inputs = InputShape {
        statics: 3,
        sequence_channels: 0,
        category_levels: levels,
    };
    ModelSpec {
        batch_norm,
        ..ModelSpec::for_variant(Variant::Fnn, inputs, 3, 5)
    }
}

fn recurrent_spec(cell: RecurrentCell, layer_norm: bool) -> ModelSpec {
    let inputs = InputShape {
        statics: 2,
        sequence_channels: 3,
        category_levels: vec![],
    };
    ModelSpec {
        recurrent_cell: cell,
        layer_norm,
        batch_norm: false,
        ..ModelSpec::for_variant(Variant::Lstm, inputs, 2, 3)
    }
}

fn criterion_gradients() -> Outcome {
    const INSTANCES: u64 = 20;
    let dense = |l: &Layout| {
        l.dense
            .iter()
            .flat_map(|d| d.w.range().chain(d.b.range()))
            .collect()
    };
    let recurrent = |l: &Layout| {
        l.recurrent
            .iter()
            .flat_map(|r| r.wx.range().chain(r.wh.range()).chain(r.b.range()))
            .collect()
    };
    let batch_norm = |l: &Layout| {
        l.dense
            .iter()
            .filter_map(|d| d.norm)
            .flat_map(|(g, b)| g.range().chain(b.range()))
            .collect()
    };
    let layer_norm = |l: &Layout| {
        l.recurrent
            .iter()
            .filter_map(|r| r.norm)
            .flat_map(|(g, b)| g.range().chain(b.range()))
            .collect()
    };
    let embedding = |l: &Layout| slot_indices(&l.embeddings);
    let all = |l: &Layout| (0..l.n_params).collect();

    let full_fnn_plus = ModelSpec::for_variant(
        Variant::FnnPlus,
        InputShape {
            statics: 5,
            sequence_channels: 0,
            category_levels: vec![7, 9],
        },
        3,
        4,
    );
    let full_lstm_plus = ModelSpec::for_variant(
        Variant::LstmPlus,
        InputShape {
            statics: 3,
            sequence_channels: 4,
            category_levels: vec![7, 9],
        },
        2,
        3,
    );
    let cases: Vec<(&str, ModelSpec, Box<dyn Fn(&Layout) -> Vec<usize>>)> = vec![
        ("dense", feed_forward_spec(vec![], false), Box::new(dense)),
        (
            "vanilla rnn",
            recurrent_spec(RecurrentCell::VanillaRnn, false),
            Box::new(recurrent),
        ),
        (
            "lstm",
            recurrent_spec(RecurrentCell::Lstm, false),
            Box::new(recurrent),
        ),
        (
            "embedding",
            feed_forward_spec(vec![3, 4], false),
            Box::new(embedding),
        ),
        (
            "batch norm",
            feed_forward_spec(vec![], true),
            Box::new(batch_norm),
        ),
        (
            "layer norm",
            recurrent_spec(RecurrentCell::Lstm, true),
            Box::new(layer_norm),
        ),
        ("FNN+", full_fnn_plus, Box::new(all)),
        ("LSTM+", full_lstm_plus, Box::new(all)),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, spec, select) in cases {
        let (worst, checked) = gradient_error(&spec, select, INSTANCES)?;
        ok &= worst <= 1e-4;
        parts.push(format!("{name} {worst:.1e} ({checked})"));
    }
    ensure(
        ok,
        format!(
            "max rel err over {INSTANCES} instances: {}",
            parts.join(", ")
        ),
    )
}

// scalar LSTM oracle

fn oracle_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn oracle_gate(wh: &Matrix, wx: &Matrix, b: &[f64], h: &[f64], x: &[f64], j: usize) -> f64 {
    let mut s = b[j];
    for k in 0..h.len() {
        s += wh.get(j, k) * h[k];
    }
    for k in 0..x.len() {
        s += wx.get(j, k) * x[k];
    }
    s
}

fn oracle_lstm(p: &LstmGateParams, h: &[f64], c: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut h_out = Vec::new();
    let mut c_out = Vec::new();
    for j in 0..h.len() {
        let f = oracle_sigmoid(oracle_gate(&p.w_hf, &p.w_xf, &p.b_f, h, x, j));
        let i = oracle_sigmoid(oracle_gate(&p.w_hi, &p.w_xi, &p.b_i, h, x, j));
        let g = oracle_gate(&p.w_hg, &p.w_xg, &p.b_g, h, x, j).tanh();
        let o = oracle_sigmoid(oracle_gate(&p.w_ho, &p.w_xo, &p.b_o, h, x, j));
        let cj = f * c[j] + i * g;
        c_out.push(cj);
        h_out.push(o * cj.tanh());
    }
    (h_out, c_out)
}

fn criterion_lstm_oracle() -> Outcome {
    let mut rng = stream(5, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let units = rng.random_range(1..=6);
        let inputs = rng.random_range(1..=5);
        let m = |r: usize, c: usize, rng: &mut LabRng| Matrix {
            rows: r,
            cols: c,
            data: (0..r * c).map(|_| uniform(rng, -2.0, 2.0)).collect(),
        };
        let v = |n: usize, rng: &mut LabRng| -> Vec<f64> {
            (0..n).map(|_| uniform(rng, -2.0, 2.0)).collect()
        };
        let p = LstmGateParams {
            w_hf: m(units, units, &mut rng),
            w_xf: m(units, inputs, &mut rng),
            w_hi: m(units, units, &mut rng),
            w_xi: m(units, inputs, &mut rng),
            w_hg: m(units, units, &mut rng),
            w_xg: m(units, inputs, &mut rng),
            w_ho: m(units, units, &mut rng),
            w_xo: m(units, inputs, &mut rng),
            b_f: v(units, &mut rng),
            b_i: v(units, &mut rng),
            b_g: v(units, &mut rng),
            b_o: v(units, &mut rng),
        };
        let (h, c, x) = (v(units, &mut rng), v(units, &mut rng), v(inputs, &mut rng));
        let (h1, c1) = lstm_cell_forward(&h, &c, &x, &p).map_err(|e| e.to_string())?;
        let (h2, c2) = oracle_lstm(&p, &h, &c, &x);
        for (a, b) in h1.iter().chain(&c1).zip(h2.iter().chain(&c2)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(
        worst <= 1e-12,
        format!("100 instances, max abs diff {worst:.1e}"),
    )
}

// metric oracle

fn naive_log_error(r: &PredictionRow) -> f64 {
    let actual = r.actual - r.paid;
    let predicted = r.predicted - r.paid;
    if predicted <= 0.0 {
        actual.ln()
    } else {
        predicted.ln() - actual.ln()
    }
}

fn naive_vs(a: &PredictionSet, b: &PredictionSet, w: Weighting) -> f64 {
    let mut wins = 0.0;
    let mut total = 0.0;
    for (x, y) in a.rows.iter().zip(&b.rows) {
        let weight = match w {
            Weighting::Unit => 1.0,
            Weighting::ClaimSize => x.actual,
            Weighting::Ocl => x.actual - x.paid,
        };
        total += weight;
        if (x.predicted - x.actual).abs() < (y.predicted - y.actual).abs() {
            wins += weight;
        }
    }
    wins / total
}

fn random_portfolio(rng: &mut LabRng) -> (PredictionSet, PredictionSet) {
    let n = rng.random_range(1..=20);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..n {
        let paid = if rng.random_bool(0.3) {
            0.0
        } else {
            uniform(rng, 0.0, 5000.0)
        };
        let actual = paid + uniform(rng, 1.0, 20000.0);
        let draw = |rng: &mut LabRng| match rng.random_range(0..4) {
            // below paid: replacement case
            0 => paid * uniform(rng, 0.0, 1.0),
            1 => paid,
            _ => paid + uniform(rng, 1.0, 30000.0),
        };
        let p1 = draw(rng);
        // ties with the first model
        let p2 = if rng.random_bool(0.25) { p1 } else { draw(rng) };
        let row = |predicted: f64| PredictionRow {
            claim_id: i as u64 + 1,
            prediction_quarter: 20,
            accident_quarter: 10,
            quarters_since_notification: 3,
            predicted,
            paid,
            actual,
            case_estimate: paid,
        };
        a.push(row(p1));
        b.push(row(p2));
    }
    (PredictionSet::new("M1", a), PredictionSet::new("M2", b))
}

fn criterion_metrics() -> Outcome {
    let mut rng = stream(9, 0);
    let mut worst = 0.0f64;
    let (mut replacements, mut ties) = (0, 0);
    for _ in 0..200 {
        let (a, b) = random_portfolio(&mut rng);
        replacements += a.rows.iter().filter(|r| r.predicted <= r.paid).count();
        ties += a
            .rows
            .iter()
            .zip(&b.rows)
            .filter(|(x, y)| x.predicted == y.predicted)
            .count();
        let errs: Vec<f64> = a.rows.iter().map(naive_log_error).collect();
        let n = errs.len() as f64;
        let naive_male = errs.iter().map(|e| e.abs()).sum::<f64>() / n;
        let naive_msle = errs.iter().map(|e| e * e).sum::<f64>() / n;
        let naive_ocl = a.rows.iter().map(|r| r.predicted - r.paid).sum::<f64>()
            / a.rows.iter().map(|r| r.actual - r.paid).sum::<f64>()
            - 1.0;
        let e =
            |x: ilr_core::Result<f64>, y: f64| x.map(|x| (x - y).abs()).map_err(|e| e.to_string());
        worst = worst.max(e(male(&a), naive_male)?);
        worst = worst.max(e(msle(&a), naive_msle)?);
        worst = worst.max(e(ocl_err(&a), naive_ocl)?);
        for w in Weighting::ALL {
            worst = worst.max(e(m1_vs_m2(&a, &b, w), naive_vs(&a, &b, w))?);
            worst = worst.max(e(m1_vs_m2(&b, &a, w), naive_vs(&b, &a, w))?);
        }
    }
    ensure(
        worst <= 1e-10 && replacements > 0 && ties > 0,
        format!("200 portfolios, max abs diff {worst:.1e}, {replacements} replacement rows, {ties} ties"),
    )
}

// smearing identities

fn criterion_smearing() -> Outcome {
    let mut rng = stream(11, 0);
    let mut worst = [0.0f64; 3];
    for _ in 0..50 {
        let n = rng.random_range(1..=200);
        let y_hat: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 5.0, 12.0)).collect();
        let exact = fit_smearing_factor(&y_hat, &y_hat, "t").map_err(|e| e.to_string())?;
        worst[0] = worst[0].max((exact.b - 1.0).abs());

        let shifted: Vec<f64> = y_hat.iter().map(|v| v + 2f64.ln()).collect();
        let doubled = fit_smearing_factor(&shifted, &y_hat, "t").map_err(|e| e.to_string())?;
        worst[1] = worst[1].max((doubled.b - 2.0).abs());

        let y: Vec<f64> = y_hat
            .iter()
            .map(|v| v + uniform(&mut rng, -1.0, 1.0))
            .collect();
        let first = fit_smearing_factor(&y, &y_hat, "t").map_err(|e| e.to_string())?;
        let corrected: Vec<f64> = apply_correction(&y_hat, &first)
            .iter()
            .map(|v| v.ln())
            .collect();
        let refit = fit_smearing_factor(&y, &corrected, "t").map_err(|e| e.to_string())?;
        worst[2] = worst[2].max((refit.b - 1.0).abs());
    }
    ensure(
        worst[0] <= 1e-12 && worst[1] <= 1e-12 && worst[2] <= 1e-12,
        format!(
            "|b-1| {:.1e}, |b-2| {:.1e}, |refit-1| {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

// split leakage

fn criterion_split_leakage() -> Outcome {
    let boundaries = SplitBoundaries::for_quarters(20);
    let valuation = boundaries.valuation_quarter();
    let mut problems = Vec::new();
    let mut claims = 0;
    for seed in 1..=10u64 {
        let portfolio = simulate_portfolio(&SimulationConfig {
            seed,
            ..SimulationConfig::desk_scale()
        })
        .map_err(|e| e.to_string())?;
        claims += portfolio.len();
        let split = assign_splits(&portfolio, boundaries, 0.2, seed).map_err(|e| e.to_string())?;
        let observations = build_observations(&portfolio);
        let settle: BTreeMap<u64, f64> = portfolio
            .iter()
            .map(|c| (c.claim_id, c.settlement_time))
            .collect();

        let leaked = [Split::Train, Split::Validation]
            .iter()
            .flat_map(|s| split.select(&observations, *s))
            .filter(|o| settle[&o.claim_id()] >= valuation as f64)
            .count();
        let mut by_split: BTreeMap<Split, BTreeSet<u64>> = BTreeMap::new();
        for s in [Split::Train, Split::Validation, Split::Test] {
            by_split.insert(
                s,
                split
                    .select(&observations, s)
                    .iter()
                    .map(|o| o.claim_id())
                    .collect(),
            );
        }
        let sets: Vec<&BTreeSet<u64>> = by_split.values().collect();
        let straddling = sets[0].intersection(sets[1]).count()
            + sets[0].intersection(sets[2]).count()
            + sets[1].intersection(sets[2]).count();

        let pool = portfolio
            .iter()
            .filter(|c| {
                c.settlement_time >= boundaries.train_cutoff
                    && c.settlement_time < boundaries.valuation
            })
            .count();
        let moved_gap = (split.moved.len() as f64 - 0.2 * pool as f64).abs();

        // claim history length in calendar quarters, counted by brute force
        let expected: usize = portfolio
            .iter()
            .map(|c| {
                (-1..=200i64)
                    .filter(|q| c.notification_time < *q as f64 && *q as f64 <= c.settlement_time)
                    .count()
            })
            .sum();

        if leaked > 0 {
            problems.push(format!("seed {seed}: {leaked} leaked observations"));
        }
        if straddling > 0 {
            problems.push(format!("seed {seed}: {straddling} straddling claims"));
        }
        if moved_gap > 1.0 {
            problems.push(format!(
                "seed {seed}: moved {} of {pool}",
                split.moved.len()
            ));
        }
        if observations.len() != expected {
            problems.push(format!(
                "seed {seed}: {} observations, expected {expected}",
                observations.len()
            ));
        }
    }
    if problems.is_empty() {
        Ok(format!("10 portfolios, {claims} claims, no violations"))
    } else {
        Err(problems.join("; "))
    }
}

// observation rule

fn bare_claim(id: u64, t1: f64, t2: f64) -> ClaimRecord {
    ClaimRecord {
        claim_id: id,
        occurrence_time: t1,
        notification_time: t1,
        settlement_time: t2,
        ultimate_size: 100.0,
        covariates: Covariates {
            severity: 1,
            age_band: 1,
            legal_rep: false,
        },
        events: vec![TransactionEvent {
            claim_id: id,
            time: t2,
            kind: TxnKind::Payment,
            payment_amount: 100.0,
            case_estimate_after: 100.0,
        }],
    }
}

fn criterion_observation_rule() -> Outcome {
    let mut rng = stream(13, 0);
    let mut portfolio = Vec::new();
    let mut same_quarter = 0;
    for id in 1..=1000u64 {
        let (t1, t2) = match id % 4 {
            0 => {
                let k = rng.random_range(0..40) as f64;
                let a = uniform(&mut rng, 0.0, 0.9);
                (k + a, k + uniform(&mut rng, a + 0.01, 0.999))
            }
            1 => {
                let k = rng.random_range(0..40) as f64;
                (k, k + rng.random_range(1..6) as f64)
            }
            _ => {
                let t1 = uniform(&mut rng, 0.0, 40.0);
                (t1, t1 + uniform(&mut rng, 0.01, 15.0))
            }
        };
        if t1.floor() == t2.floor() {
            same_quarter += 1;
        }
        portfolio.push(bare_claim(id, t1, t2));
    }
    let got: BTreeSet<(u64, i64)> = build_observations(&portfolio)
        .iter()
        .map(|o| (o.claim_id(), o.prediction_quarter))
        .collect();
    let expected: BTreeSet<(u64, i64)> = portfolio
        .iter()
        .flat_map(|c| {
            (-1..=80i64)
                .filter(|q| c.notification_time < *q as f64 && *q as f64 <= c.settlement_time)
                .map(move |q| (c.claim_id, q))
        })
        .collect();
    ensure(
        got == expected && same_quarter > 0,
        format!(
            "1000 claims, {same_quarter} same-quarter, {} observations",
            got.len()
        ),
    )
}

// grid cardinality

fn criterion_grid() -> Outcome {
    let space = GridSpace::paper();
    let sizes: Vec<(Variant, usize)> = Variant::ALL
        .iter()
        .map(|v| (*v, enumerate_grid(&space, *v).len()))
        .collect();
    let ok = sizes
        .iter()
        .all(|(v, n)| *n == if v.is_recurrent() { 16 } else { 24 });
    let detail = sizes
        .iter()
        .map(|(v, n)| format!("{v} {n}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(ok, detail)
}

// qualitative replication

struct DeskRun {
    root: PathBuf,
    datasets: Vec<u32>,
}

fn load_report(root: &Path, id: u32, slug: &str) -> Result<MetricsReport, String> {
    let path = root.join(format!("reports/d{id:03}/{slug}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn criterion_replication(run: &DeskRun) -> Vec<(&'static str, Outcome)> {
    let reports = |slug: &str| -> Result<Vec<MetricsReport>, String> {
        run.datasets
            .iter()
            .map(|id| load_report(&run.root, *id, slug))
            .collect()
    };
    let (fnn, plus) = match (reports("fnn"), reports("fnn_plus")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            return vec![
                ("8a", Err(e.clone())),
                ("8b", Err(e.clone())),
                ("8c", Err(e)),
            ]
        }
    };
    let n = fnn.len() as f64;
    let mean = |r: &[MetricsReport], f: fn(&MetricsReport) -> f64| r.iter().map(f).sum::<f64>() / n;
    let male_fnn = mean(&fnn, |r| r.male);
    let male_plus = mean(&plus, |r| r.male);
    let ocl_fnn = mean(&fnn, |r| r.ocl_err.abs());
    let ocl_plus = mean(&plus, |r| r.ocl_err.abs());
    let vs: Vec<f64> = plus
        .iter()
        .map(|r| r.vs("FNN").map_or(f64::NAN, |v| v.ocl))
        .collect();
    let vs_wins = vs.iter().filter(|v| **v > 0.5).count();
    let male_wins = fnn
        .iter()
        .zip(&plus)
        .filter(|(f, p)| p.male < f.male)
        .count();
    let ocl_wins = fnn
        .iter()
        .zip(&plus)
        .filter(|(f, p)| p.ocl_err.abs() < f.ocl_err.abs())
        .count();
    let a = ensure(
        male_plus < male_fnn && ocl_plus < ocl_fnn && vs_wins >= 4,
        format!(
            "mean MALE FNN+ {male_plus:.3} vs FNN {male_fnn:.3}; mean |OCLerr| FNN+ {ocl_plus:.3} vs FNN {ocl_fnn:.3}; \
             FNN+vsFNN(ocl) > 0.5 in {vs_wins}/{} (per dataset: MALE {male_wins}/{0}, |OCLerr| {ocl_wins}/{0})",
            fnn.len()
        ),
    );

    let b = final_revision_check(run);

    let mut c_parts = Vec::new();
    let mut c_ok = true;
    for (name, rs) in [("FNN", &fnn), ("FNN+", &plus)] {
        let better = rs
            .iter()
            .filter(|r| {
                r.ocl_err_uncorrected
                    .is_some_and(|u| r.ocl_err.abs() < u.abs())
            })
            .count();
        c_ok &= better >= 4;
        c_parts.push(format!("{name} {better}/{}", rs.len()));
    }
    let c = ensure(
        c_ok,
        format!(
            "corrected |OCLerr| below uncorrected: {}",
            c_parts.join(", ")
        ),
    );
    vec![("8a", a), ("8b", b), ("8c", c)]
}

fn final_revision_check(run: &DeskRun) -> Outcome {
    let mut n = 0;
    let mut ce_worst = 0.0f64;
    let mut fnn_total = 0.0;
    for id in &run.datasets {
        let read = |slug: &str| {
            let path = run
                .root
                .join(format!("predictions/d{id:03}/{slug}/predictions.csv"));
            PredictionSet::read_csv(&path, slug).map_err(|e| e.to_string())
        };
        let (ce, fnn) = (read("ce")?, read("fnn")?);
        for (c, f) in ce.rows.iter().zip(&fnn.rows) {
            if c.claim_id != f.claim_id {
                return Err(format!("dataset {id}: prediction rows out of order"));
            }
            if (c.case_estimate - c.actual).abs() <= 1e-9 * c.actual {
                n += 1;
                ce_worst = ce_worst.max(naive_log_error(c).abs());
                fnn_total += naive_log_error(f).abs();
            }
        }
    }
    let fnn_mean = if n > 0 { fnn_total / n as f64 } else { 0.0 };
    ensure(
        n > 0 && ce_worst <= 1e-9 && fnn_mean > 1e-3,
        format!("{n} claims at final revision: CE max |log err| {ce_worst:.1e}, FNN mean |log err| {fnn_mean:.3}"),
    )
}

fn output_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack: Vec<PathBuf> = ["reports", "summary", "predictions", "models"]
        .iter()
        .map(|d| root.join(d))
        .collect();
    while let Some(d) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&d) else {
            continue;
        };
        for entry in entries {
            let p = entry.expect("readable entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).expect("readable file");
                out.insert(
                    p.strip_prefix(root).expect("under root").to_path_buf(),
                    bytes,
                );
            }
        }
    }
    out
}

fn desk_config(out: &Path, workers: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::profile(Profile::Desk);
    c.variants = ["FNN", "FNN+", "CE-baseline"]
        .iter()
        .map(|v| v.parse().expect("known model"))
        .collect();
    c.out = out.to_path_buf();
    c.workers = workers;
    c
}

fn criterion_determinism(first: &Path, scratch: &Path) -> Outcome {
    let before = output_bytes(first);
    let rerun = run_pipeline(&desk_config(first, 0)).map_err(|e| e.to_string())?;
    let after = output_bytes(first);
    let fresh_root = scratch.join("fresh");
    run_pipeline(&desk_config(&fresh_root, 1)).map_err(|e| e.to_string())?;
    let fresh = output_bytes(&fresh_root);
    let differing = before
        .iter()
        .filter(|(k, v)| fresh.get(*k) != Some(*v))
        .count();
    ensure(
        !before.is_empty() && before == after && before == fresh && rerun.counts.trained == 0,
        format!(
            "{} output files; in-place rerun retrained {} models; fresh single-thread run differs in {differing} files",
            before.len(),
            rerun.counts.trained
        ),
    )
}

fn main() {
    let mut results: Vec<(String, Outcome, f64)> = Vec::new();
    let mut record = |label: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        results.push((label.to_string(), outcome, start.elapsed().as_secs_f64()));
    };
    record("1 gradient fidelity", &mut criterion_gradients);
    record("2 LSTM cell oracle", &mut criterion_lstm_oracle);
    record("3 metric oracle", &mut criterion_metrics);
    record("4 smearing identities", &mut criterion_smearing);
    record("5 split leakage", &mut criterion_split_leakage);
    record("6 observation rule", &mut criterion_observation_rule);
    record("7 grid cardinality", &mut criterion_grid);

    let scratch = tempfile::tempdir().expect("temporary directory");
    let root = scratch.path().join("desk");
    let start = Instant::now();
    let pipeline = run_pipeline(&desk_config(&root, 0));
    let elapsed = start.elapsed().as_secs_f64();
    match pipeline {
        Ok(_) => {
            let run = DeskRun {
                root: root.clone(),
                datasets: desk_config(&root, 0).evaluation_datasets,
            };
            for (label, o) in criterion_replication(&run) {
                results.push((
                    format!("8{} qualitative replication", &label[1..]),
                    o,
                    elapsed,
                ));
            }
            let determinism = || criterion_determinism(&root, scratch.path());
            let start = Instant::now();
            let o = determinism();
            results.push(("9 determinism".into(), o, start.elapsed().as_secs_f64()));
        }
        Err(e) => {
            for label in ["8a", "8b", "8c"] {
                results.push((
                    format!("{label} qualitative replication"),
                    Err(format!("pipeline failed: {e}")),
                    elapsed,
                ));
            }
            results.push(("9 determinism".into(), Err("pipeline failed".into()), 0.0));
        }
    }

    let mut failed = 0;
    for (label, outcome, secs) in &results {
        match outcome {
            Ok(d) => println!("PASS criterion {label} [{secs:.1}s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {label} [{secs:.1}s]: {d}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
