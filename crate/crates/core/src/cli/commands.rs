use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;

use super::config::{default_panel, Generator, RunConfig};
use crate::data::{load_table, split_for_matching, write_table, FileTag, SplitSpec};
use crate::em::{classify, FitReport, ModelDocument};
use crate::eval::{empirical_kl, Experiment, FileKl, KlTable};
use crate::impute::{match_files, ImputedFile, MatchedOutput, Method};
use crate::panel::{detect_levels, fill_levels, initial_means_for, PeakReport};
use crate::pipeline::{cluster_files, evaluation_points, Clustering, PipelineOptions};
use crate::{Error, Matrix};

/// Output directory plus the resolved configuration echoed into it.
struct Output<'a> {
    dir: PathBuf,
    cfg: &'a RunConfig,
}

impl<'a> Output<'a> {
    fn create(cfg: &'a RunConfig) -> Result<Self, Error> {
        let dir = cfg.output.dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let out = Self { dir, cfg };
        out.text("config.resolved.toml", &cfg.to_toml())?;
        Ok(out)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn text(&self, name: &str, body: &str) -> Result<(), Error> {
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    }

    /// JSON artifact with the resolved configuration embedded.
    fn json<S: Serialize>(&self, name: &str, kind: &str, body: &S) -> Result<(), Error> {
        let doc = json!({ "kind": kind, "config": self.cfg, "result": body });
        self.text(name, &(serde_json::to_string_pretty(&doc).expect("serializable") + "\n"))
    }

    fn table(&self, name: &str, m: &Matrix) -> Result<(), Error> {
        Ok(write_table(m, &self.path(name), self.cfg.output.precision)?)
    }
}

fn load(cfg: &RunConfig, path: &Option<PathBuf>, what: &str) -> Result<Matrix, Error> {
    let p = path.as_ref().ok_or_else(|| Error::Config(format!("input.{what} is required")))?;
    if !p.exists() {
        return Err(Error::io(p, "no such file"));
    }
    Ok(load_table(p, &cfg.input.missing_token)?)
}

/// `m` with its columns reordered to `columns`.
fn align(m: Matrix, columns: &[String], what: &str) -> Result<Matrix, Error> {
    if m.columns() == columns {
        return Ok(m);
    }
    let order = m.column_indices(columns).map_err(|e| Error::Config(format!("{what}: {e}")))?;
    if order.len() != m.ncols() {
        return Err(Error::Config(format!("{what} has columns {:?}, expected {:?}", m.columns(), columns)));
    }
    Ok(m.select_columns(&order)?)
}

fn load_files(cfg: &RunConfig) -> Result<(Matrix, Matrix), Error> {
    let f1 = load(cfg, &cfg.input.file1, "file1")?.with_tag(FileTag::File1);
    let f2 = load(cfg, &cfg.input.file2, "file2")?.with_tag(FileTag::File2);
    let cols = f1.columns().to_vec();
    Ok((f1, align(f2, &cols, "file2")?))
}

/// Initial means in `data` column order, plus the peak reports of any
/// levels that had to be detected.
fn initial_means(cfg: &RunConfig, data: &Matrix) -> Result<(Vec<DVector<f64>>, Vec<PeakReport>), Error> {
    if cfg.model.latent_dim >= data.ncols() {
        return Err(Error::Config(format!("model.latent_dim must be below the {} data columns", data.ncols())));
    }
    if let Some(explicit) = &cfg.model.means {
        let order: Vec<usize> = match &cfg.panel {
            Some(panel) => data
                .columns()
                .iter()
                .map(|c| {
                    panel.markers().iter().position(|m| m == c).ok_or_else(|| Error::Config(format!("column `{c}` is not a panel marker")))
                })
                .collect::<Result<_, _>>()?,
            None => (0..data.ncols()).collect(),
        };
        let means = explicit
            .iter()
            .map(|m| {
                if m.len() != data.ncols() {
                    return Err(Error::Config(format!("initial mean has {} entries for {} columns", m.len(), data.ncols())));
                }
                Ok(DVector::from_iterator(order.len(), order.iter().map(|&j| m[j])))
            })
            .collect::<Result<_, _>>()?;
        return Ok((means, Vec::new()));
    }
    let panel = cfg.panel.as_ref().ok_or_else(|| Error::Config("cluster-nn needs a [panel] section or model.means".into()))?;
    let (filled, reports) = fill_levels(panel, data, cfg.histogram.bins, cfg.histogram.smoothing)?;
    Ok((initial_means_for(&filled, data.columns())?, reports))
}

fn pipeline_options(cfg: &RunConfig) -> PipelineOptions {
    PipelineOptions { latent_dim: cfg.model.latent_dim, init_seed: cfg.init_seed(), fit: cfg.fit_options(), impute: cfg.impute_options() }
}

fn seeds(cfg: &RunConfig) -> serde_json::Value {
    json!({
        "init": cfg.init_seed(),
        "em": cfg.em_seed(),
        "split": cfg.split_seed(),
        "evaluate_first": cfg.evaluate_first_seed(),
        "simulate": cfg.simulate_seed(),
    })
}

fn model_document(cfg: &RunConfig, c: &Clustering<f64>, peaks: &[PeakReport]) -> ModelDocument {
    let provenance = json!({
        "config": cfg,
        "seeds": seeds(cfg),
        "fit": c.fit,
        "init": {
            "cluster_sizes": c.init.cluster_sizes,
            "fallback": c.init.fallback,
            "random_range": c.init.random_range,
            "random_entries": "symmetric, uniform in [-r, r], r = mean estimable diagonal",
        },
        "detected_levels": peaks.iter().map(|p| json!({"marker": p.marker, "levels": p.levels})).collect::<Vec<_>>(),
    });
    ModelDocument::from_model(&c.model, Some(provenance))
}

fn labels_csv(labels: &[usize]) -> String {
    let mut s = String::from("row,cluster\n");
    for (r, l) in labels.iter().enumerate() {
        s.push_str(&format!("{r},{}\n", l + 1));
    }
    s
}

fn provenance_csv(f: &ImputedFile<f64>) -> String {
    let mut s = String::from("row,donor_row,cluster,fallback\n");
    for r in 0..f.donor.len() {
        let donor = f.donor[r].map(|d| d.to_string()).unwrap_or_default();
        let cluster = f.label.as_ref().map(|l| (l[r] + 1).to_string()).unwrap_or_default();
        s.push_str(&format!("{r},{donor},{cluster},{}\n", u8::from(f.fallback[r])));
    }
    s
}

fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iteration,loglik\n");
    for (i, v) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}

/// Specific columns of both files, for scatter plots of the imputed
/// joint distribution.
fn scatter(cfg: &RunConfig, m: &Matrix) -> Result<Option<Matrix>, Error> {
    let Some(p) = &cfg.pattern else { return Ok(None) };
    let r = p.resolve(m.columns())?;
    let cols: Vec<usize> = r.specific1.iter().chain(&r.specific2).copied().collect();
    if cols.is_empty() {
        return Ok(None);
    }
    Ok(Some(m.select_columns(&cols)?))
}

fn write_matched(out: &Output, matched: &MatchedOutput<f64>) -> Result<(), Error> {
    out.table("completed1.csv", &matched.file1.completed)?;
    out.table("completed2.csv", &matched.file2.completed)?;
    out.text("provenance1.csv", &provenance_csv(&matched.file1))?;
    out.text("provenance2.csv", &provenance_csv(&matched.file2))?;
    for (i, f) in [(1, &matched.file1), (2, &matched.file2)] {
        if let Some(s) = scatter(out.cfg, &f.completed)? {
            out.table(&format!("scatter{i}.csv"), &s)?;
        }
    }
    Ok(())
}

fn common_columns(cfg: &RunConfig, columns: &[String]) -> Result<Vec<usize>, Error> {
    Ok(cfg.pattern()?.resolve(columns)?.common)
}

pub fn simulate(cfg: &RunConfig) -> Result<(), Error> {
    let out = Output::create(cfg)?;
    let seed = cfg.simulate_seed();
    let mixture = match cfg.simulate.generator {
        Generator::Toy => cfg.simulate.toy.mixture(),
        Generator::Panel => cfg.simulate.panel.mixture(cfg.panel.as_ref().unwrap_or(&default_panel()))?,
    };
    let sample = mixture.sample::<f64>(cfg.simulate.n, seed)?;
    out.table("data.csv", &sample.data)?;
    out.text("labels.csv", &labels_csv(&sample.labels))?;
    let components: Vec<_> = mixture
        .means
        .iter()
        .zip(&mixture.covariances)
        .zip(&mixture.weights)
        .map(|((m, c), w)| json!({"weight": w, "mean": m.as_slice(), "covariance": c.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>()}))
        .collect();
    out.json("truth.json", "simulate", &json!({"seed": seed, "columns": mixture.columns, "components": components}))
}

pub fn split(cfg: &RunConfig) -> Result<(), Error> {
    let source = load(cfg, &cfg.input.source, "source")?;
    let spec =
        SplitSpec { n1: cfg.split.n1, n2: cfg.split.n2, n_eval: cfg.split.n_eval, seed: cfg.split_seed(), pattern: cfg.pattern()?.clone() };
    let s = split_for_matching(&source, &spec)?;
    let out = Output::create(cfg)?;
    out.table("file1.csv", &s.file1)?;
    out.table("file2.csv", &s.file2)?;
    out.table("eval.csv", &s.eval)?;
    out.table("truth1.csv", &s.truth1(&source))?;
    out.table("truth2.csv", &s.truth2(&source))?;
    out.json(
        "split.json",
        "split",
        &json!({"seed": spec.seed, "file1_rows": s.file1_rows, "file2_rows": s.file2_rows, "eval_rows": s.eval_rows}),
    )?;
    println!("file1: {} rows, file2: {} rows, eval: {} rows", s.file1.nrows(), s.file2.nrows(), s.eval.nrows());
    Ok(())
}

pub fn histogram(cfg: &RunConfig) -> Result<(), Error> {
    let data = match &cfg.input.source {
        Some(_) => load(cfg, &cfg.input.source, "source")?,
        None => {
            let (f1, f2) = load_files(cfg)?;
            f1.stack(&f2)?
        }
    };
    let markers: Vec<String> = match &cfg.panel {
        Some(p) => p.markers().iter().filter(|m| data.column_index(m).is_some()).cloned().collect(),
        None => data.columns().to_vec(),
    };
    if markers.is_empty() {
        return Err(Error::Config("no panel marker appears in the data".into()));
    }
    let out = Output::create(cfg)?;
    let mut reports = Vec::new();
    for m in &markers {
        let j = data.column_index(m).expect("filtered above");
        let report = detect_levels(&data.observed_column(j), cfg.histogram.bins, cfg.histogram.smoothing)?.into_report(m);
        let mut s = String::from("left,right,count,smoothed\n");
        for b in 0..report.counts.len() {
            s.push_str(&format!("{},{},{},{}\n", report.edges[b], report.edges[b + 1], report.counts[b], report.smoothed[b]));
        }
        out.text(&format!("histogram_{m}.csv"), &s)?;
        println!(
            "{m}: negative {:.1}, positive {:.1}{}",
            report.levels.negative,
            report.levels.positive,
            if report.single_peak { " (single peak)" } else { "" }
        );
        reports.push(report);
    }
    out.json("peaks.json", "histogram", &reports)
}

pub fn fit(cfg: &RunConfig) -> Result<(), Error> {
    let (f1, f2) = load_files(cfg)?;
    let (means, peaks) = initial_means(cfg, &f1.stack(&f2)?)?;
    let c = cluster_files(&f1, &f2, &means, &pipeline_options(cfg))?;
    let out = Output::create(cfg)?;
    model_document(cfg, &c, &peaks).save(&out.path("model.json"))?;
    out.text("trace.csv", &trace_csv(&c.model.trace))?;
    out.text("labels1.csv", &labels_csv(&c.labels1))?;
    out.text("labels2.csv", &labels_csv(&c.labels2))?;
    report_fit(&c.fit, &c.model.trace);
    Ok(())
}

fn report_fit(r: &FitReport, trace: &[f64]) {
    println!(
        "EM: {} iterations, {}, final log-likelihood {}",
        r.iterations,
        if r.converged { "converged" } else { "not converged" },
        trace.last().copied().unwrap_or(f64::NAN)
    );
}

pub fn impute(cfg: &RunConfig) -> Result<(), Error> {
    let (f1, f2) = load_files(cfg)?;
    let common = common_columns(cfg, f1.columns())?;
    let opts = cfg.impute_options();
    let matched = match cfg.impute.method {
        Method::Nn => match_files(&f1, &f2, &common, None, &opts)?,
        Method::ClusterNn => {
            let path = cfg.input.model.as_ref().ok_or_else(|| Error::Config("input.model is required for cluster-nn".into()))?;
            let model = ModelDocument::load(path)?.to_model::<f64>()?;
            let (f1m, f2m) = (align(f1.clone(), &model.columns, "file1")?, align(f2.clone(), &model.columns, "file2")?);
            let (l1, l2) = (classify(&model, &f1m)?, classify(&model, &f2m)?);
            match_files(&f1, &f2, &common, Some((&l1, &l2)), &opts)?
        }
    };
    let out = Output::create(cfg)?;
    write_matched(&out, &matched)?;
    println!(
        "imputed {} + {} rows with {} ({} fallbacks)",
        f1.nrows(),
        f2.nrows(),
        matched.method.as_str(),
        matched.file1.fallback_count() + matched.file2.fallback_count()
    );
    Ok(())
}

/// Summary of a `match` run.
#[derive(Debug, Clone, Serialize)]
pub struct MatchReport {
    pub method: Method,
    pub columns: Vec<String>,
    pub rows: [usize; 2],
    pub fallbacks: [usize; 2],
    pub cluster_sizes: Option<Vec<usize>>,
    pub fit: Option<FitReport>,
    pub loglik_trace: Vec<f64>,
    pub seeds: serde_json::Value,
    pub kl: Option<FileKl>,
}

pub fn run_match(cfg: &RunConfig) -> Result<(), Error> {
    let (f1, f2) = load_files(cfg)?;
    let common = common_columns(cfg, f1.columns())?;
    let opts = pipeline_options(cfg);
    let out = Output::create(cfg)?;

    let (matched, clustering) = match cfg.impute.method {
        Method::Nn => (match_files(&f1, &f2, &common, None, &opts.impute)?, None),
        Method::ClusterNn => {
            let (means, peaks) = initial_means(cfg, &f1.stack(&f2)?)?;
            let c = cluster_files(&f1, &f2, &means, &opts)?;
            let matched = match_files(&f1, &f2, &common, Some((&c.labels1, &c.labels2)), &opts.impute)?;
            model_document(cfg, &c, &peaks).save(&out.path("model.json"))?;
            out.text("trace.csv", &trace_csv(&c.model.trace))?;
            out.text("labels1.csv", &labels_csv(&c.labels1))?;
            out.text("labels2.csv", &labels_csv(&c.labels2))?;
            report_fit(&c.fit, &c.model.trace);
            (matched, Some(c))
        }
    };
    write_matched(&out, &matched)?;

    let kl = match (&cfg.input.truth1, &cfg.input.truth2, &cfg.input.holdout) {
        (Some(_), Some(_), Some(_)) => Some(score(cfg, &f1, &f2, &matched, clustering.as_ref(), &common)?),
        _ => None,
    };
    if let Some(kl) = &kl {
        println!("KL(file 1) = {:.4}, KL(file 2) = {:.4}", kl.file1.value, kl.file2.value);
    }
    let report = MatchReport {
        method: matched.method,
        columns: f1.columns().to_vec(),
        rows: [f1.nrows(), f2.nrows()],
        fallbacks: [matched.file1.fallback_count(), matched.file2.fallback_count()],
        cluster_sizes: clustering.as_ref().map(|c| {
            let mut sizes = vec![0; c.model.n_components()];
            c.labels1.iter().chain(&c.labels2).for_each(|&l| sizes[l] += 1);
            sizes
        }),
        fit: clustering.as_ref().map(|c| c.fit.clone()),
        loglik_trace: clustering.as_ref().map(|c| c.model.trace.clone()).unwrap_or_default(),
        seeds: seeds(cfg),
        kl,
    };
    out.json("match_report.json", "match", &report)
}

fn score(
    cfg: &RunConfig,
    f1: &Matrix,
    f2: &Matrix,
    matched: &MatchedOutput<f64>,
    clustering: Option<&Clustering<f64>>,
    common: &[usize],
) -> Result<FileKl, Error> {
    let cols = f1.columns().to_vec();
    let truth1 = align(load(cfg, &cfg.input.truth1, "truth1")?, &cols, "truth1")?;
    let truth2 = align(load(cfg, &cfg.input.truth2, "truth2")?, &cols, "truth2")?;
    let holdout = align(load(cfg, &cfg.input.holdout, "holdout")?, &cols, "holdout")?;
    let pattern = cfg.pattern()?;
    let opts = cfg.impute_options();
    let donors2 = clustering.map(|c| (&c.model, c.labels2.as_slice()));
    let donors1 = clustering.map(|c| (&c.model, c.labels1.as_slice()));
    let eval1 = evaluation_points(&holdout, pattern, FileTag::File1, f2, donors2, common, &opts)?;
    let eval2 = evaluation_points(&holdout, pattern, FileTag::File2, f1, donors1, common, &opts)?;
    let method = matched.method.as_str();
    Ok(FileKl {
        file1: empirical_kl(&matched.file1.completed, &truth1, &eval1, method)?,
        file2: empirical_kl(&matched.file2.completed, &truth2, &eval2, method)?,
    })
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), Error> {
    let source = load(cfg, &cfg.input.source, "source")?;
    let pattern = cfg.pattern()?.clone();
    let (means, _) = initial_means(cfg, &source)?;
    let experiment =
        Experiment { source, pattern, n1: cfg.split.n1, n2: cfg.split.n2, n_eval: cfg.split.n_eval, means, options: pipeline_options(cfg) };
    let first = cfg.evaluate_first_seed();
    let mut reps = Vec::with_capacity(cfg.evaluate.repetitions);
    for r in 0..cfg.evaluate.repetitions as u64 {
        let rep = experiment.replicate(first + r)?;
        println!(
            "seed {}: nn {:.4} / {:.4}, cluster-nn {:.4} / {:.4}",
            rep.seed, rep.kl_nn.file1.value, rep.kl_nn.file2.value, rep.kl_cluster_nn.file1.value, rep.kl_cluster_nn.file2.value
        );
        reps.push(rep);
    }
    let table = KlTable::from_replicates(&reps);
    let out = Output::create(cfg)?;
    out.text("kl_table.txt", &table.render())?;
    out.json("kl_table.json", "evaluate", &table)?;
    print!("{}", table.render());
    Ok(())
}

/// Reads a labels file written by this tool back into zero-based labels.
pub fn read_labels(path: &Path) -> Result<Vec<usize>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.rsplit(',')
                .next()
                .and_then(|v| v.trim().parse::<usize>().ok())
                .filter(|&v| v >= 1)
                .map(|v| v - 1)
                .ok_or_else(|| Error::io(path, format!("bad label line `{l}`")))
        })
        .collect()
}
