//! Coefficient statistics and selection: per-coefficient F-test scores, the
//! three selection settings, PCA reduction, and normality/outlier analysis of
//! last-stage coefficients.

use std::io::Write;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erf;

use crate::dataset::ImageSet;
use crate::error::{Error, Result};
use crate::linalg::{pca_fit, pca_fit_accumulated, CovarianceAccumulator, Matrix, PcaReducer};
use crate::multistage::{SaakModel, StageCoeffs};

/// Jarque-Bera acceptance threshold: the χ²₂ critical value at α = 0.05.
pub const JB_CRITICAL: f64 = 5.991;

/// Grubbs removes at most this fraction of the samples.
pub const GRUBBS_MAX_REMOVAL: f64 = 0.10;

/// Images per forward batch in the streaming passes.
pub const STREAM_BATCH: usize = 512;

/// Location of one signed coefficient: stage (1-based), grid position and
/// spectral channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoeffAddress {
    pub stage: usize,
    pub row: usize,
    pub col: usize,
    pub channel: usize,
}

impl CoeffAddress {
    /// Tie-break key: stage, channel, row, col.
    fn key(&self) -> (usize, usize, usize, usize) {
        (self.stage, self.channel, self.row, self.col)
    }

    fn flat_index(&self, side: usize, depth: usize) -> usize {
        (self.row * side + self.col) * depth + self.channel
    }
}

/// Coefficient selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    /// Leading last-stage coefficients (DC, then AC by eigenvalue).
    Leading = 1,
    /// Last-stage coefficients ranked by F-score.
    LastStageF = 2,
    /// Coefficients of every stage ranked by F-score.
    AllStagesF = 3,
}

impl Setting {
    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn pool(self) -> Pool {
        match self {
            Setting::Leading | Setting::LastStageF => Pool::LastStage,
            Setting::AllStagesF => Pool::AllStages,
        }
    }

    pub fn uses_scores(self) -> bool {
        self != Setting::Leading
    }
}

impl TryFrom<u8> for Setting {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Setting::Leading),
            2 => Ok(Setting::LastStageF),
            3 => Ok(Setting::AllStagesF),
            _ => Err(Error::invalid(format!("selection setting must be 1, 2 or 3, got {v}"))),
        }
    }
}

/// Set of coefficients a setting draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    LastStage,
    AllStages,
}

impl Pool {
    fn stages(self, model: &SaakModel) -> std::ops::RangeInclusive<usize> {
        let last = model.stage_count();
        match self {
            Pool::LastStage => last..=last,
            Pool::AllStages => 1..=last,
        }
    }

    /// Addresses in the pool's natural (flat grid) order.
    pub fn addresses(self, model: &SaakModel) -> Vec<CoeffAddress> {
        let mut out = Vec::new();
        for p in self.stages(model) {
            let side = model.grid_side(p);
            let depth = model.stage(p).signed_dim();
            for row in 0..side {
                for col in 0..side {
                    for channel in 0..depth {
                        out.push(CoeffAddress {
                            stage: p,
                            row,
                            col,
                            channel,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn len(self, model: &SaakModel) -> usize {
        self.stages(model).map(|p| model.stage_len(p)).sum()
    }

    /// Coefficient values in the order of [`Pool::addresses`].
    pub fn values(self, coeffs: &StageCoeffs, out: &mut Vec<f64>) {
        let last = coeffs.stage_count();
        let range = match self {
            Pool::LastStage => last..=last,
            Pool::AllStages => 1..=last,
        };
        for p in range {
            out.extend_from_slice(coeffs.stage(p).values());
        }
    }
}

/// One-way ANOVA result for a single coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FScore {
    /// Between-group variability.
    pub bgv: f64,
    /// Within-group variability.
    pub wgv: f64,
    /// `bgv / wgv`; `+∞` when the groups are perfectly separated
    /// (`wgv = 0 < bgv`), `0` when both vanish.
    pub value: f64,
}

impl FScore {
    fn new(bgv: f64, wgv: f64) -> Self {
        let value = if wgv > 0.0 {
            bgv / wgv
        } else if bgv > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        FScore { bgv, wgv, value }
    }

    /// Zero within-group variability with distinct group means.
    pub fn is_separated(&self) -> bool {
        self.value == f64::INFINITY
    }
}

/// Per-class running means and squared deviations for a vector of
/// coefficients (Welford updates).
#[derive(Debug, Clone)]
pub struct ClassMoments {
    dim: usize,
    counts: Vec<u64>,
    means: Vec<f64>,
    m2: Vec<f64>,
}

impl ClassMoments {
    pub fn new(classes: usize, dim: usize) -> Self {
        ClassMoments {
            dim,
            counts: vec![0; classes],
            means: vec![0.0; classes * dim],
            m2: vec![0.0; classes * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn push(&mut self, class: usize, x: &[f64]) -> Result<()> {
        Error::check_dim(self.dim, x.len())?;
        if class >= self.counts.len() {
            return Err(Error::invalid(format!("class {class} out of range")));
        }
        self.counts[class] += 1;
        let n = self.counts[class] as f64;
        let mean = &mut self.means[class * self.dim..(class + 1) * self.dim];
        let m2 = &mut self.m2[class * self.dim..(class + 1) * self.dim];
        for ((m, s), v) in mean.iter_mut().zip(m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
        Ok(())
    }

    /// F-score of every coefficient.
    pub fn f_scores(&self) -> Result<Vec<FScore>> {
        let c = self.counts.len();
        if c < 2 {
            return Err(Error::invalid("the F-test needs at least two classes"));
        }
        if let Some(empty) = self.counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class {empty} has no samples")));
        }
        let t: u64 = self.counts.iter().sum();
        if t <= c as u64 {
            return Err(Error::invalid(format!("{t} samples are too few for {c} classes")));
        }
        let (t, c_f) = (t as f64, c as f64);
        let scores = (0..self.dim)
            .map(|j| {
                let grand = (0..c)
                    .map(|k| self.counts[k] as f64 * self.means[k * self.dim + j])
                    .sum::<f64>()
                    / t;
                let between: f64 = (0..c)
                    .map(|k| {
                        let d = self.means[k * self.dim + j] - grand;
                        self.counts[k] as f64 * d * d
                    })
                    .sum();
                let within: f64 = (0..c).map(|k| self.m2[k * self.dim + j]).sum();
                FScore::new(between / (c_f - 1.0), within / (t - c_f))
            })
            .collect();
        Ok(scores)
    }
}

/// F-score of one coefficient given its samples grouped by class.
pub fn f_score(groups: &[Vec<f64>]) -> Result<FScore> {
    let mut moments = ClassMoments::new(groups.len(), 1);
    for (c, g) in groups.iter().enumerate() {
        for &v in g {
            moments.push(c, &[v])?;
        }
    }
    Ok(moments.f_scores()?[0])
}

/// Ordered coefficient selection with an optional fitted PCA reducer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    setting: Setting,
    addresses: Vec<CoeffAddress>,
    scores: Option<Vec<f64>>,
    reducer: Option<PcaReducer>,
}

impl FeatureSpec {
    pub fn from_parts(
        setting: Setting,
        addresses: Vec<CoeffAddress>,
        scores: Option<Vec<f64>>,
        reducer: Option<PcaReducer>,
    ) -> Result<Self> {
        if let Some(s) = &scores {
            Error::check_dim(addresses.len(), s.len())?;
            if s.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::Format("feature scores are not sorted".into()));
            }
        }
        if let Some(r) = &reducer {
            Error::check_dim(addresses.len(), r.input_dim())?;
        }
        Ok(FeatureSpec {
            setting,
            addresses,
            scores,
            reducer,
        })
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn addresses(&self) -> &[CoeffAddress] {
        &self.addresses
    }

    pub fn scores(&self) -> Option<&[f64]> {
        self.scores.as_deref()
    }

    pub fn reducer(&self) -> Option<&PcaReducer> {
        self.reducer.as_ref()
    }

    pub fn raw_dim(&self) -> usize {
        self.addresses.len()
    }

    /// Dimension of [`FeatureSpec::features`].
    pub fn output_dim(&self) -> usize {
        self.reducer.as_ref().map_or(self.raw_dim(), PcaReducer::output_dim)
    }

    /// Checks every address against the model's grids.
    pub fn validate(&self, model: &SaakModel) -> Result<()> {
        for a in &self.addresses {
            let ok = a.stage >= 1
                && a.stage <= model.stage_count()
                && a.row < model.grid_side(a.stage)
                && a.col < model.grid_side(a.stage)
                && a.channel < model.stage(a.stage).signed_dim();
            if !ok {
                return Err(Error::invalid(format!(
                    "coefficient address {a:?} is outside the model"
                )));
            }
        }
        Ok(())
    }

    /// Selected coefficients in selection order.
    pub fn raw_features(&self, coeffs: &StageCoeffs) -> Vec<f64> {
        self.addresses
            .iter()
            .map(|a| {
                let g = coeffs.stage(a.stage);
                g.values()[a.flat_index(g.width(), g.depth())]
            })
            .collect()
    }

    /// Raw features, PCA-projected when a reducer is fitted.
    pub fn features(&self, coeffs: &StageCoeffs) -> Result<Vec<f64>> {
        let raw = self.raw_features(coeffs);
        match &self.reducer {
            Some(r) => r.project(&raw),
            None => Ok(raw),
        }
    }

    /// Fits the PCA reducer on raw training vectors (one per row).
    pub fn reduce(mut self, raw: &Matrix, target_dim: usize) -> Result<Self> {
        Error::check_dim(self.raw_dim(), raw.cols())?;
        self.reducer = Some(pca_fit(raw, target_dim)?);
        Ok(self)
    }

    /// The first `n` selected coefficients, without a reducer.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n > self.raw_dim() {
            return Err(Error::invalid(format!(
                "{n} coefficients requested, {} selected",
                self.raw_dim()
            )));
        }
        FeatureSpec::from_parts(
            self.setting,
            self.addresses[..n].to_vec(),
            self.scores.as_ref().map(|s| s[..n].to_vec()),
            None,
        )
    }

    pub fn with_reducer(mut self, reducer: PcaReducer) -> Result<Self> {
        Error::check_dim(self.raw_dim(), reducer.input_dim())?;
        self.reducer = Some(reducer);
        Ok(self)
    }
}

/// Selects `n` coefficients of `model` under `setting`. `scores` must cover
/// the setting's pool in [`Pool::addresses`] order; Setting 1 ignores them.
pub fn select_features(
    model: &SaakModel,
    setting: Setting,
    n: usize,
    scores: Option<&[FScore]>,
) -> Result<FeatureSpec> {
    let pool = setting.pool();
    let available = pool.len(model);
    if n > available {
        return Err(Error::invalid(format!(
            "{n} coefficients requested but setting {} offers {available}",
            setting.number()
        )));
    }
    let addresses = pool.addresses(model);
    if !setting.uses_scores() {
        let p = model.stage_count();
        let side = model.grid_side(p);
        let depth = model.stage(p).signed_dim();
        let chosen = crate::multistage::leading_order(side, depth)
            .into_iter()
            .take(n)
            .map(|i| addresses[i])
            .collect();
        return FeatureSpec::from_parts(setting, chosen, None, None);
    }
    let scores = scores.ok_or_else(|| Error::invalid("F-scores are required for settings 2 and 3"))?;
    Error::check_dim(available, scores.len())?;
    let mut order: Vec<usize> = (0..available).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .value
            .total_cmp(&scores[i].value)
            .then_with(|| addresses[i].key().cmp(&addresses[j].key()))
    });
    order.truncate(n);
    FeatureSpec::from_parts(
        setting,
        order.iter().map(|&i| addresses[i]).collect(),
        Some(order.iter().map(|&i| scores[i].value).collect()),
        None,
    )
}

/// In-memory selection from already transformed training images.
pub fn select(
    model: &SaakModel,
    coeffs: &[StageCoeffs],
    labels: &[u8],
    setting: Setting,
    n: usize,
) -> Result<FeatureSpec> {
    Error::check_dim(coeffs.len(), labels.len())?;
    if !setting.uses_scores() {
        return select_features(model, setting, n, None);
    }
    let pool = setting.pool();
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut moments = ClassMoments::new(classes, pool.len(model));
    let mut buf = Vec::new();
    for (c, &l) in coeffs.iter().zip(labels) {
        buf.clear();
        pool.values(c, &mut buf);
        moments.push(l as usize, &buf)?;
    }
    select_features(model, setting, n, Some(&moments.f_scores()?))
}

fn labels_of(images: &ImageSet) -> Result<&[u8]> {
    images.labels().ok_or(Error::Empty("images carry no labels"))
}

/// Streams `images` through the model once and accumulates per-class
/// moments of every coefficient in `pool`.
pub fn class_moments(model: &SaakModel, images: &ImageSet, pool: Pool) -> Result<ClassMoments> {
    let labels = labels_of(images)?;
    let classes = images.class_count().unwrap_or(0);
    let mut moments = ClassMoments::new(classes, pool.len(model));
    let mut buf = Vec::new();
    for start in (0..images.len()).step_by(STREAM_BATCH) {
        let end = (start + STREAM_BATCH).min(images.len());
        for (i, c) in (start..end).zip(model.forward_batch(images, start..end)?) {
            buf.clear();
            pool.values(&c, &mut buf);
            moments.push(labels[i] as usize, &buf)?;
        }
    }
    Ok(moments)
}

/// Fits a PCA reducer for every spec from one streaming pass.
pub fn fit_reducers(
    model: &SaakModel,
    images: &ImageSet,
    specs: Vec<FeatureSpec>,
    target_dim: usize,
) -> Result<Vec<FeatureSpec>> {
    let mut accs: Vec<CovarianceAccumulator> = specs.iter().map(|s| CovarianceAccumulator::new(s.raw_dim())).collect();
    for start in (0..images.len()).step_by(STREAM_BATCH) {
        let end = (start + STREAM_BATCH).min(images.len());
        let coeffs = model.forward_batch(images, start..end)?;
        for (spec, acc) in specs.iter().zip(accs.iter_mut()) {
            let mut block = Vec::with_capacity(coeffs.len() * spec.raw_dim());
            for c in &coeffs {
                block.extend(spec.raw_features(c));
            }
            acc.push_batch(&block)?;
        }
    }
    specs
        .into_iter()
        .zip(&accs)
        .map(|(spec, acc)| spec.with_reducer(pca_fit_accumulated(acc, target_dim)?))
        .collect()
}

/// Feature matrices (one row per image) for every spec from one pass.
pub fn feature_matrices(model: &SaakModel, images: &ImageSet, specs: &[FeatureSpec]) -> Result<Vec<Matrix>> {
    let mut data: Vec<Vec<f64>> = specs
        .iter()
        .map(|s| Vec::with_capacity(images.len() * s.output_dim()))
        .collect();
    for start in (0..images.len()).step_by(STREAM_BATCH) {
        let end = (start + STREAM_BATCH).min(images.len());
        let coeffs = model.forward_batch(images, start..end)?;
        for (spec, out) in specs.iter().zip(data.iter_mut()) {
            let rows: Vec<Vec<f64>> = coeffs.par_iter().map(|c| spec.features(c)).collect::<Result<_>>()?;
            rows.iter().for_each(|r| out.extend_from_slice(r));
        }
    }
    specs
        .iter()
        .zip(data)
        .map(|(s, d)| Matrix::from_vec(images.len(), s.output_dim(), d))
        .collect()
}

/// Last-stage signed coefficients of every image, one row each.
pub fn last_stage_matrix(model: &SaakModel, images: &ImageSet) -> Result<Matrix> {
    let dim = model.stage_len(model.stage_count());
    let mut data = Vec::with_capacity(images.len() * dim);
    for start in (0..images.len()).step_by(STREAM_BATCH) {
        let end = (start + STREAM_BATCH).min(images.len());
        for c in model.forward_batch(images, start..end)? {
            data.extend_from_slice(c.last().values());
        }
    }
    Matrix::from_vec(images.len(), dim, data)
}

/// Population skewness and excess kurtosis.
fn shape_moments(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in samples {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    if m2 == 0.0 || m2.sqrt() <= 4.0 * f64::EPSILON * mean.abs() {
        return Err(Error::ZeroVariance);
    }
    Ok((m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0))
}

/// Jarque-Bera normality test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JarqueBera {
    pub statistic: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

impl JarqueBera {
    /// Normality is not rejected at α = 0.05.
    pub fn passes(&self) -> bool {
        self.statistic < JB_CRITICAL
    }
}

pub fn jarque_bera(samples: &[f64]) -> Result<JarqueBera> {
    if samples.len() < 8 {
        return Err(Error::invalid(format!(
            "the Jarque-Bera test needs at least 8 samples, got {}",
            samples.len()
        )));
    }
    let (skewness, excess_kurtosis) = shape_moments(samples)?;
    let n = samples.len() as f64;
    Ok(JarqueBera {
        statistic: n / 6.0 * (skewness * skewness + excess_kurtosis * excess_kurtosis / 4.0),
        skewness,
        excess_kurtosis,
    })
}

/// Two-sided Grubbs critical value for `n` samples.
pub fn grubbs_critical(n: usize, alpha: f64) -> Result<f64> {
    if n < 3 {
        return Err(Error::invalid("the Grubbs test needs at least 3 samples"));
    }
    let nf = n as f64;
    let t = StudentsT::new(0.0, 1.0, nf - 2.0)
        .map_err(|e| Error::Numerical(e.to_string()))?
        .inverse_cdf(1.0 - alpha / (2.0 * nf));
    Ok((nf - 1.0) / nf.sqrt() * (t * t / (nf - 2.0 + t * t)).sqrt())
}

/// Iterative two-sided Grubbs outlier removal. Removes the most extreme
/// sample while its statistic exceeds the critical value, at most
/// [`GRUBBS_MAX_REMOVAL`] of the input. Order of survivors is preserved.
pub fn grubbs_filter(samples: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if samples.len() < 7 {
        return Err(Error::invalid(format!(
            "the Grubbs filter needs at least 7 samples, got {}",
            samples.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("significance level {alpha} outside (0, 1)")));
    }
    let mut kept: Vec<f64> = samples.to_vec();
    let cap = (GRUBBS_MAX_REMOVAL * samples.len() as f64).floor() as usize;
    for round in 0..=cap {
        let n = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / n;
        let var = kept.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        if var <= 0.0 {
            if round == 0 {
                return Err(Error::ZeroVariance);
            }
            break;
        }
        if round == cap {
            break;
        }
        let (idx, dev) = kept
            .iter()
            .enumerate()
            .map(|(i, x)| (i, (x - mean).abs()))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if dev / var.sqrt() > grubbs_critical(kept.len(), alpha)? {
            kept.remove(idx);
        } else {
            break;
        }
    }
    Ok(kept)
}

/// Share of the leading coefficients passing Jarque-Bera for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassNormality {
    pub class: usize,
    pub samples: usize,
    pub raw_percent: f64,
    pub filtered_percent: f64,
}

/// For every class, takes its first `per_class` rows of `last_stage` and
/// reports the percentage of the first `leading` coefficients that pass the
/// Jarque-Bera test before and after Grubbs filtering. Constant coefficients
/// count as failing.
pub fn normality_report(
    last_stage: &Matrix,
    labels: &[u8],
    per_class: usize,
    leading: usize,
) -> Result<Vec<ClassNormality>> {
    Error::check_dim(last_stage.rows(), labels.len())?;
    if leading > last_stage.cols() {
        return Err(Error::invalid(format!(
            "{leading} leading coefficients requested, {} available",
            last_stage.cols()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut rows_by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if rows_by_class[l as usize].len() < per_class {
            rows_by_class[l as usize].push(i);
        }
    }
    rows_by_class
        .par_iter()
        .enumerate()
        .map(|(class, rows)| {
            if rows.len() < per_class {
                return Err(Error::invalid(format!(
                    "class {class} has {} samples, {per_class} needed",
                    rows.len()
                )));
            }
            let (mut raw, mut filtered) = (0usize, 0usize);
            for j in 0..leading {
                let column: Vec<f64> = rows.iter().map(|&r| last_stage.get(r, j)).collect();
                if jarque_bera(&column).is_ok_and(|t| t.passes()) {
                    raw += 1;
                }
                let pass = match grubbs_filter(&column, 0.05) {
                    Ok(kept) => jarque_bera(&kept).is_ok_and(|t| t.passes()),
                    Err(Error::ZeroVariance) => false,
                    Err(e) => return Err(e),
                };
                if pass {
                    filtered += 1;
                }
            }
            Ok(ClassNormality {
                class,
                samples: per_class,
                raw_percent: 100.0 * raw as f64 / leading as f64,
                filtered_percent: 100.0 * filtered as f64 / leading as f64,
            })
        })
        .collect()
}

/// Silverman's rule-of-thumb bandwidth. Falls back to the standard
/// deviation when the IQR vanishes, and to a small absolute width for
/// constant data.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if spread > 0.0 {
        0.9 * spread * n.powf(-0.2)
    } else {
        1e-3 * mean.abs().max(1.0)
    }
}

/// One row of a smoothed histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityPoint {
    pub class: usize,
    pub bin_center: f64,
    pub density: f64,
}

/// Gaussian-kernel smoothed histograms on a common grid of `bins` bins.
/// Each value is the kernel density averaged over its bin, so the bins of a
/// class sum (times the bin width) to the mass inside the grid.
pub fn smoothed_histograms(per_class: &[Vec<f64>], bins: usize) -> Result<Vec<DensityPoint>> {
    if bins == 0 {
        return Err(Error::invalid("at least one bin is required"));
    }
    let bandwidths: Vec<f64> = per_class
        .iter()
        .map(|v| {
            if v.is_empty() {
                Err(Error::Empty("class without samples"))
            } else {
                Ok(silverman_bandwidth(v))
            }
        })
        .collect::<Result<_>>()?;
    let lo = per_class
        .iter()
        .zip(&bandwidths)
        .map(|(v, h)| v.iter().fold(f64::INFINITY, |m, x| m.min(*x)) - 5.0 * h)
        .fold(f64::INFINITY, f64::min);
    let hi = per_class
        .iter()
        .zip(&bandwidths)
        .map(|(v, h)| v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x)) + 5.0 * h)
        .fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let phi = |z: f64| 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
    let mut out = Vec::with_capacity(per_class.len() * bins);
    for (class, (values, &h)) in per_class.iter().zip(&bandwidths).enumerate() {
        let n = values.len() as f64;
        for b in 0..bins {
            let (a, z) = (lo + b as f64 * width, lo + (b + 1) as f64 * width);
            let mass: f64 = values.iter().map(|x| phi((z - x) / h) - phi((a - x) / h)).sum();
            out.push(DensityPoint {
                class,
                bin_center: 0.5 * (a + z),
                density: mass / (n * width),
            });
        }
    }
    Ok(out)
}

/// Writes density points as CSV with columns `class,bin_center,density`.
pub fn write_histogram_csv<W: Write>(points: &[DensityPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "bin_center", "density"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for p in points {
        w.write_record([p.class.to_string(), p.bin_center.to_string(), p.density.to_string()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
