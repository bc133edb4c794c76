//! Subcommand implementations. Each takes a resolved [`RunConfig`] and
//! explicit paths so it can also be driven from tests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use canalseg::metrics::{evaluate_case, evaluate_dataset, AggregateReport, CaseReport, DatasetReport};
use canalseg::nets::{CoarseNet, FineNet};
use canalseg::phantom::{generate_dataset, CaseEntry, DatasetOptions, Manifest, Split, MANIFEST_FILE};
use canalseg::pipeline::{finish_side, run_pipeline, PipelineOutput, Side, Voi, VoiRecord};
use canalseg::postproc::refine_canal;
use canalseg::train::{coarse_sample, fine_samples, train_coarse, train_fine, EpochStats};
use canalseg::volgrid::{BinaryMask, Grid, NormVolume, ProbMap, Volume};
use canalseg::windowing::{auto_window, WindowParams};
use serde::Serialize;

use crate::config::RunConfig;

pub const CONFIG_ECHO: &str = "config.json";
pub const COARSE_CKPT: &str = "coarse.ckpt";
pub const FINE_CKPT: &str = "fine.ckpt";
pub const MASK_FILE: &str = "mask.volz";
pub const ABLATION_CSV: &str = "ablation.csv";

pub fn mask_file(side: Side) -> String {
    format!("mask_{}.volz", side.name())
}

fn voi_sidecar(side: Side) -> String {
    format!("voi_{}.json", side.name())
}

fn voi_crop(side: Side) -> String {
    format!("voi_{}.volz", side.name())
}

fn fine_prob(side: Side) -> String {
    format!("fine_{}.volz", side.name())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Creates `out` and records the config that produced its contents.
pub fn prepare_out_dir(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_ECHO), cfg.dump() + "\n").context("echoing config")
}

pub fn phantom_gen(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    prepare_out_dir(out, cfg)?;
    let d = &cfg.dataset;
    let opts = DatasetOptions {
        n: d.count,
        base_seed: d.base_seed,
        regimes: d.regimes.clone(),
        n_test: d.test_count,
        template: d.phantom.clone(),
    };
    Ok(generate_dataset(out, &opts)?)
}

pub fn window(cfg: &RunConfig, volume: &Path, out: Option<&Path>) -> Result<WindowParams> {
    let v = Volume::load(volume)?;
    let (w, norm) = auto_window(&v, cfg.pipeline.bin_width)?;
    if let Some(out) = out {
        prepare_out_dir(out, cfg)?;
        write_json(&out.join("window.json"), &w)?;
        norm.save(&out.join("normalized.volz"))?;
    }
    Ok(w)
}

fn load_split(root: &Path, split: Split) -> Result<Vec<CaseEntry>> {
    let manifest = Manifest::load(&root.join(MANIFEST_FILE))?;
    let cases: Vec<CaseEntry> = manifest.split(split).cloned().collect();
    if cases.is_empty() {
        anyhow::bail!("dataset {} has no {split:?} cases", root.display());
    }
    Ok(cases)
}

fn log_epoch(stage: &'static str) -> impl FnMut(EpochStats) {
    move |s| log::info!("{stage} epoch {}: loss {:.5}", s.epoch, s.loss)
}

/// Trains the coarse net on the dataset's train split.
pub fn train_coarse_net(cfg: &RunConfig, dataset: &Path) -> Result<(CoarseNet, Vec<EpochStats>)> {
    let mut samples = Vec::new();
    for case in load_split(dataset, Split::Train)? {
        let c = case.load(dataset)?;
        samples.push(coarse_sample(&c.volume, &c.gt_left, &c.gt_right, &cfg.pipeline)?);
    }
    let mut net = CoarseNet::new(cfg.coarse_net.clone(), cfg.training.seed)?;
    let history = train_coarse(&mut net, &samples, &cfg.training, &mut log_epoch("coarse"))?;
    Ok((net, history))
}

/// Trains the fine net on ground-truth VOIs of the dataset's train split.
pub fn train_fine_net(cfg: &RunConfig, dataset: &Path) -> Result<(FineNet, Vec<EpochStats>)> {
    let mut samples = Vec::new();
    for case in load_split(dataset, Split::Train)? {
        let c = case.load(dataset)?;
        samples.extend(fine_samples(&c.volume, &c.gt_left, &c.gt_right, &cfg.pipeline)?);
    }
    let mut net = FineNet::new(cfg.fine_net.clone(), cfg.training.seed)?;
    let history = train_fine(&mut net, &samples, &cfg.training, &mut log_epoch("fine"))?;
    Ok((net, history))
}

pub fn cmd_train_coarse(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<PathBuf> {
    prepare_out_dir(out, cfg)?;
    let (mut net, history) = train_coarse_net(cfg, dataset)?;
    let path = out.join(COARSE_CKPT);
    net.save(&path)?;
    write_json(&out.join("coarse_history.json"), &history)?;
    Ok(path)
}

pub fn cmd_train_fine(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<PathBuf> {
    prepare_out_dir(out, cfg)?;
    let (mut net, history) = train_fine_net(cfg, dataset)?;
    let path = out.join(FINE_CKPT);
    net.save(&path)?;
    write_json(&out.join("fine_history.json"), &history)?;
    Ok(path)
}

pub fn load_nets(coarse: &Path, fine: &Path) -> Result<(CoarseNet, FineNet)> {
    let c = CoarseNet::load(coarse).with_context(|| format!("loading coarse checkpoint {}", coarse.display()))?;
    let f = FineNet::load(fine).with_context(|| format!("loading fine checkpoint {}", fine.display()))?;
    Ok((c, f))
}

/// Writes every stage output of a pipeline run.
pub fn write_pipeline_output(out: &Path, o: &PipelineOutput) -> Result<()> {
    write_json(&out.join("window.json"), &o.window)?;
    o.normalized.save(&out.join("normalized.volz"))?;
    o.coarse.save(&out.join("coarse_prob.volz"))?;
    o.coarse_left.save(&out.join("coarse_left.volz"))?;
    o.coarse_right.save(&out.join("coarse_right.volz"))?;
    for rec in &o.vois {
        write_json(&out.join(voi_sidecar(rec.voi.side)), &rec.voi)?;
        rec.prob.save(&out.join(fine_prob(rec.voi.side)))?;
    }
    for side in Side::BOTH {
        o.side(side).save(&out.join(mask_file(side)))?;
    }
    o.full.save(&out.join(MASK_FILE))?;
    Ok(())
}

pub fn infer(cfg: &RunConfig, volume: &Path, coarse: &Path, fine: &Path, out: &Path) -> Result<PipelineOutput> {
    let v = Volume::load(volume)?;
    let (mut c, mut f) = load_nets(coarse, fine)?;
    prepare_out_dir(out, cfg)?;
    let o = run_pipeline(&v, &mut c, &mut f, &cfg.pipeline)?;
    // Crops are saved for inspection only; nothing downstream reads them.
    for rec in &o.vois {
        let mask = match rec.voi.side {
            Side::Left => &o.coarse_left,
            Side::Right => &o.coarse_right,
        };
        let (_, crop) = canalseg::pipeline::extract_voi(&o.normalized, mask, rec.voi.side, &cfg.pipeline)?;
        crop.save(&out.join(voi_crop(rec.voi.side)))?;
    }
    write_pipeline_output(out, &o)?;
    Ok(o)
}

/// Final masks from the fine-stage files of an `infer` output directory:
/// merge each side's VOI, refine, and take the union.
pub fn postprocess_infer_dir(cfg: &RunConfig, infer_dir: &Path, out: &Path) -> Result<[BinaryMask; 3]> {
    let reference: NormVolume = Grid::load(&infer_dir.join("normalized.volz"))?;
    let (dims, spacing) = (reference.dims(), reference.spacing());
    prepare_out_dir(out, cfg)?;
    let mut masks = Vec::new();
    for side in Side::BOTH {
        let sidecar = infer_dir.join(voi_sidecar(side));
        let rec = if sidecar.exists() {
            let text = fs::read_to_string(&sidecar).with_context(|| format!("reading {}", sidecar.display()))?;
            let voi: Voi = serde_json::from_str(&text).with_context(|| format!("parsing {}", sidecar.display()))?;
            let prob: ProbMap = Grid::load(&infer_dir.join(fine_prob(side)))?;
            Some(VoiRecord { voi, prob })
        } else {
            log::warn!("no {} VOI in {}", side.name(), infer_dir.display());
            None
        };
        let m = finish_side(rec.as_ref(), dims, spacing, &cfg.pipeline)?;
        m.save(&out.join(mask_file(side)))?;
        masks.push(m);
    }
    let full = masks[0].union(&masks[1])?;
    full.save(&out.join(MASK_FILE))?;
    let [l, r]: [BinaryMask; 2] = masks.try_into().expect("two sides");
    Ok([l, r, full])
}

pub fn postprocess_mask(cfg: &RunConfig, mask: &Path, out: &Path) -> Result<BinaryMask> {
    let m = BinaryMask::load(mask)?;
    prepare_out_dir(out, cfg)?;
    let refined = refine_canal(&m);
    refined.save(&out.join("refined.volz"))?;
    Ok(refined)
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub id: String,
    pub report: CaseReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub summary: DatasetReport,
    pub cases: Vec<CaseResult>,
}

/// Runs the pipeline over the test split with in-memory nets.
pub fn evaluate_with_nets(cfg: &RunConfig, dataset: &Path, coarse: &mut CoarseNet, fine: &mut FineNet) -> Result<EvalReport> {
    let mut cases = Vec::new();
    for case in load_split(dataset, Split::Test)? {
        let c = case.load(dataset)?;
        let o = run_pipeline(&c.volume, coarse, fine, &cfg.pipeline)?;
        let report = evaluate_case(&o.left, &o.right, &c.gt_left, &c.gt_right)?;
        log::info!("{}: dice left {:?} right {:?}", case.id, report.left.dice, report.right.dice);
        cases.push(CaseResult { id: case.id.clone(), report });
    }
    summarize(cases)
}

/// Scores saved predictions laid out as `<pred_dir>/<case id>/mask_{left,right}.volz`.
pub fn evaluate_predictions(dataset: &Path, pred_dir: &Path) -> Result<EvalReport> {
    let mut cases = Vec::new();
    for case in load_split(dataset, Split::Test)? {
        let c = case.load(dataset)?;
        let dir = pred_dir.join(&case.id);
        let l = BinaryMask::load(&dir.join(mask_file(Side::Left)))?;
        let r = BinaryMask::load(&dir.join(mask_file(Side::Right)))?;
        cases.push(CaseResult { id: case.id.clone(), report: evaluate_case(&l, &r, &c.gt_left, &c.gt_right)? });
    }
    summarize(cases)
}

fn summarize(cases: Vec<CaseResult>) -> Result<EvalReport> {
    let reports: Vec<CaseReport> = cases.iter().map(|c| c.report.clone()).collect();
    Ok(EvalReport { summary: evaluate_dataset(&reports)?, cases })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut s = String::from("case,side,precision,recall,f1,iou,dice,specificity\n");
    for c in &report.cases {
        for (side, r) in [("left", &c.report.left), ("right", &c.report.right), ("overall", &c.report.overall)] {
            let vals = [r.precision, r.recall, r.f1, r.iou, r.dice, r.specificity].map(fmt_opt);
            s += &format!("{},{side},{}\n", c.id, vals.join(","));
        }
    }
    s
}

pub fn write_eval(out: &Path, report: &EvalReport, csv: bool) -> Result<()> {
    write_json(&out.join("eval.json"), report)?;
    if csv {
        fs::write(out.join("eval.csv"), eval_csv(report)).context("writing eval.csv")?;
    }
    Ok(())
}

/// Fine-net variants compared by `ablate`, in table column order. The two
/// "with" columns are both the full network.
pub const ABLATION_VARIANTS: [(&str, bool, bool); 4] = [
    ("Without Multiscale", false, true),
    ("With Multiscale", true, true),
    ("Without Residual Connections", true, false),
    ("With Residual Connections", true, true),
];

/// Metric rows of the ablation table.
pub const ABLATION_METRICS: [&str; 5] = ["mIOU", "Precision", "Recall", "Dice Score", "F1 Score"];

fn ablation_values(a: &AggregateReport) -> [Option<f64>; 5] {
    [a.iou.mean, a.precision.mean, a.recall.mean, a.dice.mean, a.f1.mean]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    /// Per-side aggregate for each entry of [`ABLATION_VARIANTS`].
    pub variants: Vec<AggregateReport>,
}

impl AblationRun {
    pub fn dice(&self, variant: usize) -> Option<f64> {
        self.variants[variant].dice.mean
    }
}

/// For every seed: train the coarse net (unless one is supplied), train one
/// fine net per distinct variant, and score each on the test split.
pub fn ablate(cfg: &RunConfig, dataset: &Path, coarse: Option<&Path>, out: &Path) -> Result<Vec<AblationRun>> {
    prepare_out_dir(out, cfg)?;
    let mut runs = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.training.seed = seed;
        let mut coarse_net = match coarse {
            Some(p) => CoarseNet::load(p).with_context(|| format!("loading coarse checkpoint {}", p.display()))?,
            None => train_coarse_net(&run_cfg, dataset)?.0,
        };
        let mut trained: Vec<((bool, bool), AggregateReport)> = Vec::new();
        let mut variants = Vec::new();
        for (name, multiscale, residual) in ABLATION_VARIANTS {
            let key = (multiscale, residual);
            let agg = match trained.iter().find(|(k, _)| *k == key) {
                Some((_, a)) => a.clone(),
                None => {
                    log::info!("seed {seed}: training fine variant {name}");
                    let mut vcfg = run_cfg.clone();
                    vcfg.fine_net.multiscale = multiscale;
                    vcfg.fine_net.residual = residual;
                    let (mut fine, _) = train_fine_net(&vcfg, dataset)?;
                    let a = evaluate_with_nets(&vcfg, dataset, &mut coarse_net, &mut fine)?.summary.per_side;
                    trained.push((key, a.clone()));
                    a
                }
            };
            variants.push(agg);
        }
        runs.push(AblationRun { seed, variants });
    }
    fs::write(out.join(ABLATION_CSV), ablation_csv(&runs)).context("writing ablation.csv")?;
    write_json(&out.join("ablation.json"), &runs)?;
    Ok(runs)
}

pub fn ablation_csv(runs: &[AblationRun]) -> String {
    let mut s = String::from("seed,metric");
    for (name, _, _) in ABLATION_VARIANTS {
        s += ",";
        s += name;
    }
    s += "\n";
    for run in runs {
        let cols: Vec<[Option<f64>; 5]> = run.variants.iter().map(ablation_values).collect();
        for (m, metric) in ABLATION_METRICS.iter().enumerate() {
            s += &format!("{},{metric}", run.seed);
            for c in &cols {
                s += ",";
                s += &fmt_opt(c[m]);
            }
            s += "\n";
        }
    }
    s
}
