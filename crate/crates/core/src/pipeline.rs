//! The two-file matching pipeline: fit the mixture to both files at once,
//! label every row, then impute each file from the other.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{apply_pattern, FilePattern, FileTag, MaskedMatrix};
use crate::em::{classify, fit, init_model, FitOptions, FitReport, InitOptions, InitReport, MixtureModel};
use crate::impute::{cluster_nn_impute, match_files, nn_impute, ImputeOptions, MatchedOutput, Method};
use crate::scalar::Real;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub latent_dim: usize,
    pub init_seed: u64,
    pub fit: FitOptions,
    pub impute: ImputeOptions,
}

/// Fitted mixture and zero-based labels for the rows of both files.
#[derive(Debug, Clone)]
pub struct Clustering<T: Real> {
    pub model: MixtureModel<T>,
    pub init: InitReport<T>,
    pub fit: FitReport,
    pub labels1: Vec<usize>,
    pub labels2: Vec<usize>,
}

/// Initializes from `means`, runs EM on the stacked files and classifies
/// every row.
pub fn cluster_files<T: Real>(
    file1: &MaskedMatrix<T>,
    file2: &MaskedMatrix<T>,
    means: &[DVector<T>],
    opts: &PipelineOptions,
) -> Result<Clustering<T>, Error> {
    let stacked = file1.stack(file2)?;
    let (model0, init) = init_model(&stacked, means, &InitOptions::new(opts.latent_dim, opts.init_seed))?;
    let (model, report) = fit(&model0, &stacked, &opts.fit)?;
    let mut labels1 = classify(&model, &stacked)?;
    let labels2 = labels1.split_off(file1.nrows());
    Ok(Clustering { model, init, fit: report, labels1, labels2 })
}

/// Runs `method` end to end. `means` is only used by the cluster method.
pub fn run_match<T: Real>(
    file1: &MaskedMatrix<T>,
    file2: &MaskedMatrix<T>,
    common: &[usize],
    method: Method,
    means: &[DVector<T>],
    opts: &PipelineOptions,
) -> Result<(MatchedOutput<T>, Option<Clustering<T>>), Error> {
    match method {
        Method::Nn => Ok((match_files(file1, file2, common, None, &opts.impute)?, None)),
        Method::ClusterNn => {
            let c = cluster_files(file1, file2, means, opts)?;
            let out = match_files(file1, file2, common, Some((&c.labels1, &c.labels2)), &opts.impute)?;
            Ok((out, Some(c)))
        }
    }
}

/// Evaluation points for one file: the holdout rows with that file's
/// missing block hidden, then completed from the other file exactly as
/// the file itself was. With a model, holdout rows are labeled by it and
/// the search is cluster-restricted.
pub fn evaluation_points<T: Real>(
    holdout: &MaskedMatrix<T>,
    pattern: &FilePattern,
    file: FileTag,
    donors: &MaskedMatrix<T>,
    cluster: Option<(&MixtureModel<T>, &[usize])>,
    common: &[usize],
    opts: &ImputeOptions,
) -> Result<MaskedMatrix<T>, Error> {
    let hidden = apply_pattern(holdout, pattern, &vec![file; holdout.nrows()])?;
    let out = match cluster {
        None => nn_impute(&hidden, donors, common, opts)?,
        Some((model, donor_labels)) => {
            let labels = classify(model, &hidden)?;
            cluster_nn_impute(&hidden, donors, &labels, donor_labels, common, opts)?
        }
    };
    Ok(out.completed.with_tag(FileTag::Eval))
}
