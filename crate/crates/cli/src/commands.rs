use std::fmt::Write as _;
use std::path::Path;

use facehop_core::active::{
    labels_to_reach, passive_accuracy, run_active_loop, trace_csv, ActiveConfig, ActivePool, GroundTruth, TestSet,
};
use facehop_core::classify::{EncodedFace, Hyper, Verdict};
use facehop_core::container::{load_model, save_model};
use facehop_core::dataio::{self, make_synthetic, FacePair, ImageStore, PairProtocol, SyntheticSpec};
use facehop_core::pipeline::{
    self, cross_validate, cross_validate_classifiers, evaluate, mean_std, model_parameter_table, parameter_table,
    DimensionRow, FeatureExtractor, FoldReport, PlaneCounts, TrainConfig,
};
use facehop_core::pixelhop::{Accounting, PixelHopConfig};
use facehop_core::preprocess::{preprocess_face, PreprocessConfig};
use facehop_core::{RgbImage, VerificationModel};
use facehop_service::{ApiError, ServiceConfig};

use crate::args::*;
use crate::error::{CliError, CliResult, Context};

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        let msg = e.to_string();
        match e.reason {
            "dataset_unavailable" | "bad_image" => Self::Data(msg),
            _ if e.status.is_client_error() => Self::Usage(msg),
            _ => Self::Data(msg),
        }
    }
}

fn hyper(a: &HyperArgs) -> CliResult<Hyper> {
    if a.lambda.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
        return Err(CliError::Usage("--lambda must be positive".into()));
    }
    if a.max_iter == 0 || !(a.tol > 0.0) {
        return Err(CliError::Usage("--max-iter and --tol must be positive".into()));
    }
    Ok(Hyper { lambda: a.lambda, max_iter: a.max_iter, tol: a.tol })
}

fn train_config(a: &FitArgs) -> CliResult<TrainConfig> {
    let plane = |base: PixelHopConfig, ec, ef| PixelHopConfig {
        energy_cutoff: ec,
        energy_forward: ef,
        window: a.window,
        patch_sample_rate: a.patch_rate,
        seed: a.seed,
        ..base
    };
    let cfg = TrainConfig {
        luma: plane(PixelHopConfig::luma(a.ef), a.ec, a.ef),
        chroma: plane(PixelHopConfig::chroma(a.ef_crcb), a.ec_crcb, a.ef_crcb),
        hyper: hyper(&a.hyper)?,
        augment: a.augment,
    };
    cfg.luma.validate().context(|| "luma submodel".into())?;
    cfg.chroma.validate().context(|| "chroma submodel".into())?;
    Ok(cfg)
}

fn preprocess(a: &DataArgs) -> PreprocessConfig {
    PreprocessConfig { size: a.size, low_resolution: a.low_res, center_crop: a.center_crop }
}

fn load_protocol(a: &DataArgs) -> CliResult<PairProtocol> {
    let path = if a.pairs.is_absolute() { a.pairs.clone() } else { a.data.join(&a.pairs) };
    let mut protocol = dataio::parse_pairs_file(&path, &a.data).context(|| path.display().to_string())?;
    dataio::resolve_images(&mut protocol)?;
    Ok(protocol)
}

fn open_model(path: &Path) -> CliResult<VerificationModel> {
    load_model(path).context(|| format!("model {}", path.display()))
}

fn dimension_table(model: &VerificationModel) -> String {
    let mut s = format!("{:<8} {:>4} {:>4} {:>4} {:>4} {:>6}\n", "submodel", "K1", "K2", "K3", "P", "N");
    for (name, sub) in [("M_Y", &model.submodel_y), ("M_CrCb", &model.submodel_crcb)] {
        let row = DimensionRow::from_counts(sub.hop.level_counts());
        let _ = writeln!(s, "{name:<8} {:>4} {:>4} {:>4} {:>4} {:>6}", row.k[0], row.k[1], row.k[2], row.p, row.n);
    }
    s
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let cfg = train_config(&a.fit)?;
    let protocol = load_protocol(&a.data)?;
    let store = ImageStore::new(preprocess(&a.data), a.data.cache);
    let (train_pairs, test_pairs) = match a.hold_out {
        Some(k) => {
            let (train, test) = dataio::kfold_split(&protocol, k)?;
            (train, Some(test))
        }
        None => (protocol.all_pairs(), None),
    };
    log::info!("training on {} pairs", train_pairs.len());
    let model = pipeline::train_verifier(&store, &train_pairs, &cfg)?;
    save_model(&model, &a.out).context(|| format!("writing {}", a.out.display()))?;
    print!("{}", dimension_table(&model));
    println!("parameters: {}", model_parameter_table(&model, Accounting::Text).total);
    if let Some(test) = test_pairs {
        let r = evaluate(&model, &store, &test)?;
        println!(
            "held-out fold {}: accuracy {:.4} (M_Y {:.4}, M_CrCb {:.4}) on {} pairs",
            a.hold_out.unwrap_or_default(),
            r.accuracy,
            r.accuracy_y,
            r.accuracy_crcb,
            r.pairs
        );
    }
    println!("model written to {}", a.out.display());
    Ok(())
}

fn folds_csv(reports: &[FoldReport]) -> String {
    let mut s = String::from("fold,pairs,accuracy,accuracy_y,accuracy_crcb\n");
    for f in reports {
        let r = &f.report;
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", f.fold, r.pairs, r.accuracy, r.accuracy_y, r.accuracy_crcb);
    }
    s
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let protocol = load_protocol(&a.data)?;
    if let Some(k) = a.folds {
        if k != protocol.folds.len() {
            return Err(CliError::Usage(format!(
                "--folds {k} does not match the {} folds of the pairs file",
                protocol.folds.len()
            )));
        }
    }
    let reports = match &a.model {
        Some(path) => {
            let model = open_model(path)?;
            let store = ImageStore::new(model.preprocess.clone(), a.data.cache);
            cross_validate_classifiers(&model, &store, &protocol, hyper(&a.fit.hyper)?)?
        }
        None => {
            let cfg = train_config(&a.fit)?;
            let store = ImageStore::new(preprocess(&a.data), a.data.cache);
            cross_validate(&store, &protocol, &cfg)?
        }
    };
    println!("{:>4} {:>6} {:>9} {:>9} {:>9}", "fold", "pairs", "accuracy", "M_Y", "M_CrCb");
    for f in &reports {
        let r = &f.report;
        println!("{:>4} {:>6} {:>9.4} {:>9.4} {:>9.4}", f.fold, r.pairs, r.accuracy, r.accuracy_y, r.accuracy_crcb);
    }
    let (m, s) = mean_std(&reports.iter().map(|f| f.report.accuracy).collect::<Vec<_>>());
    println!("mean accuracy {m:.4} ± {s:.4}");
    if let Some(path) = &a.csv {
        std::fs::write(path, folds_csv(&reports)).context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn read_face(path: &Path, cfg: &PreprocessConfig) -> CliResult<facehop_core::FacePlanes> {
    let img = RgbImage::load(path).context(|| path.display().to_string())?;
    Ok(preprocess_face(&img, cfg)?)
}

fn verdict_json(v: &Verdict) -> serde_json::Value {
    serde_json::json!({
        "probability": v.probability,
        "is_match": v.is_match,
        "p_y": v.p_y,
        "p_crcb": v.p_crcb,
    })
}

pub fn verify(a: VerifyArgs) -> CliResult<()> {
    let model = open_model(&a.model)?;
    let fa = read_face(&a.image_a, &model.preprocess)?;
    let fb = read_face(&a.image_b, &model.preprocess)?;
    let v = model.verify(&fa, &fb)?;
    if a.json {
        println!("{}", verdict_json(&v));
    } else {
        println!(
            "{} (probability {:.4}; M_Y {:.4}, M_CrCb {:.4})",
            if v.is_match { "match" } else { "mismatch" },
            v.probability,
            v.p_y,
            v.p_crcb
        );
    }
    Ok(())
}

pub fn identify(a: IdentifyArgs) -> CliResult<()> {
    let model = open_model(&a.model)?;
    let entries = dataio::identity_folder(&a.gallery).context(|| a.gallery.display().to_string())?;
    if entries.is_empty() {
        return Err(CliError::Data(format!("no gallery images under {}", a.gallery.display())));
    }
    let gallery: Vec<(String, EncodedFace)> = entries
        .iter()
        .map(|(id, path)| Ok((id.clone(), model.encode(&read_face(path, &model.preprocess)?)?)))
        .collect::<CliResult<_>>()?;
    let probe = model.encode(&read_face(&a.probe, &model.preprocess)?)?;
    let ranked = model.identify(gallery.iter().map(|(id, f)| (id.as_str(), f)), &probe)?;
    println!("{:>4}  {:<24} {:>11} {:>9}", "rank", "identity", "score", "prob");
    for (i, (id, v)) in ranked.iter().take(a.top).enumerate() {
        println!("{:>4}  {:<24} {:>11.4} {:>9.4}", i + 1, id, v.score, v.probability);
    }
    Ok(())
}

pub fn active(a: ActiveArgs) -> CliResult<()> {
    let OracleKind::GroundTruth = a.oracle;
    let hyper = hyper(&a.hyper)?;
    let protocol = load_protocol(&a.data)?;
    let n = protocol.folds.len();
    if a.test_folds == 0 || a.test_folds >= n {
        return Err(CliError::Usage(format!(
            "--test-folds must be between 1 and {} for a {n}-fold pairs file",
            n.saturating_sub(1)
        )));
    }
    let model = a.model.as_deref().map(open_model).transpose()?;
    let preprocess = model.as_ref().map_or_else(|| preprocess(&a.data), |m| m.preprocess.clone());
    let store = ImageStore::new(preprocess, a.data.cache);

    let gather = |folds: &[dataio::Fold]| -> Vec<FacePair> { folds.iter().flat_map(|f| f.pairs().cloned()).collect() };
    let pool_pairs = gather(&protocol.folds[..n - a.test_folds]);
    let test_pairs = gather(&protocol.folds[n - a.test_folds..]);
    let labels = |pairs: &[FacePair]| -> CliResult<Vec<bool>> {
        pairs
            .iter()
            .map(|p| p.label.ok_or_else(|| CliError::Data("the ground-truth oracle needs labeled pairs".into())))
            .collect()
    };
    let (truth, test_labels) = (labels(&pool_pairs)?, labels(&test_pairs)?);

    let extractor = match &model {
        Some(m) => m.extractor(),
        None => FeatureExtractor::fit(&store, &dataio::distinct_images(&pool_pairs), &TrainConfig::default())?,
    };
    let pool = ActivePool::new(extractor.pair_features(&store, &pool_pairs)?)?;
    let test_features = extractor.pair_features(&store, &test_pairs)?;
    let test = TestSet { features: &test_features, labels: &test_labels };

    let budget = a.budget.unwrap_or(pool.len() / 2);
    let config = ActiveConfig { initial_fraction: a.initial_fraction, hyper, ..ActiveConfig::new(a.strategy, a.batch, budget, a.seed) };
    let state = run_active_loop(&pool, test, config, &mut GroundTruth { labels: &truth })?;
    let csv = trace_csv(&state.trace);
    match &a.out {
        Some(path) => std::fs::write(path, &csv).context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }

    let passive = passive_accuracy(&pool.features, &truth, test, hyper)?;
    let last = state.trace.last().map_or(f64::NAN, |p| p.test_accuracy);
    let summary = format!(
        "strategy {}: {} rounds, {} labels, final accuracy {last:.4}; full pool ({} labels) {passive:.4}; 99% of it reached at {}",
        a.strategy,
        state.trace.len(),
        state.labeled.len(),
        pool.len(),
        labels_to_reach(&state.trace, 0.99 * passive).map_or("never".into(), |k| format!("{k} labels")),
    );
    if a.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

pub fn params(a: ParamsArgs) -> CliResult<()> {
    let accounting = match a.accounting {
        AccountingArg::Text => Accounting::Text,
        AccountingArg::Table4 => Accounting::Table4,
    };
    let table = match (&a.model, a.k1, a.k2, a.k3) {
        (Some(path), ..) => model_parameter_table(&open_model(path)?, accounting),
        (None, Some(k1), Some(k2), Some(k3)) => {
            let y = PlaneCounts { k: [k1.0, k2.0, k3.0], level1_dim: 25, level1_units: 1 };
            let c = PlaneCounts { k: [k1.1, k2.1, k3.1], level1_dim: 50, level1_units: 1 };
            parameter_table(y, c, accounting)
        }
        _ => return Err(CliError::Usage("give --model or all of --k1, --k2, --k3".into())),
    };
    match a.format {
        Format::Text => print!("{table}"),
        Format::Json => println!("{}", serde_json::to_string_pretty(&table).map_err(|e| CliError::Data(e.to_string()))?),
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let mut spec = SyntheticSpec::new(a.identities, a.images, a.noise, a.seed).with_folds(a.folds);
    if let Some(p) = a.pairs {
        spec = spec.with_pairs(p);
    }
    let data = make_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out).context(|| a.out.display().to_string())?;
    let manifest = data.write_to(&a.out)?;
    println!(
        "{} identities, {} images, {} folds of {} matched + {} mismatched pairs written to {}",
        manifest.identities.len(),
        data.images.len(),
        data.protocol.folds.len(),
        manifest.pairs_per_fold,
        manifest.pairs_per_fold,
        a.out.display()
    );
    Ok(())
}

pub fn features(a: FeaturesArgs) -> CliResult<()> {
    let model = open_model(&a.model)?;
    let protocol = load_protocol(&a.data)?;
    let store = ImageStore::new(model.preprocess.clone(), a.data.cache);
    let pairs = protocol.all_pairs();
    let feats = model.extractor().pair_features(&store, &pairs)?;
    let folds: Vec<usize> = protocol.folds.iter().enumerate().flat_map(|(k, f)| std::iter::repeat_n(k, f.len())).collect();

    let mut s = String::from("pair,fold,label");
    for i in 0..model.submodel_y.layout.dim() {
        let _ = write!(s, ",y{i}");
    }
    for i in 0..model.submodel_crcb.layout.dim() {
        let _ = write!(s, ",crcb{i}");
    }
    s.push('\n');
    for (i, pair) in pairs.iter().enumerate() {
        let label = pair.label.map_or(String::new(), |l| u8::from(l).to_string());
        let _ = write!(s, "{i},{},{label}", folds[i]);
        for v in feats.y[i].iter().chain(&feats.crcb[i]) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    match &a.out {
        Some(path) => std::fs::write(path, s).context(|| format!("writing {}", path.display()))?,
        None => print!("{s}"),
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> CliResult<()> {
    let config = ServiceConfig {
        bind: a.bind,
        model_path: a.model,
        token: a.token,
        cache_capacity: a.cache,
        ..ServiceConfig::new(a.data, a.sessions)
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(facehop_service::serve(config))?;
    Ok(())
}
