//! Binary model, feature-spec, classifier and coefficient-dump files, plus
//! PGM image output.
//!
//! Every binary file starts with an 8-byte magic and a `u32` format
//! version. Integers are little-endian `u32` unless noted, reals are
//! little-endian IEEE-754 `f64`. Matrices are stored row-major.
//!
//! Model (`SAAKMDL\0`): version, stage count P, input side, input depth K₀,
//! then P caps (`0xFFFF_FFFF` means all). Per stage: input dimension N, AC
//! kernel count M, sample count (`u64`), DC energy, residual energy, M
//! eigenvalues, and the `M × N` AC basis. The DC kernel is implicit.
//!
//! Feature spec (`SAAKFEAT`): version, setting, address count n, score flag,
//! reduced dimension r (0 when no reducer). Then n addresses as four `u32`
//! (stage, row, col, channel), n scores when flagged, and when r > 0 the
//! reducer mean (n), eigenvalues (r) and `r × n` basis.
//!
//! Classifier (`SAAKCLSF`): version, kind (1 KNN, 2 SVM).
//! KNN: K, rows, dim, `rows` label bytes, `rows × dim` training matrix.
//! SVM: classes C, dim d, λ, epochs, seed (`u64`), η₀, mean (d), scale (d),
//! `C × d` weights, C biases.
//!
//! Coefficient dump (`SAAKCOEF`): version, stage entry count E, E triples
//! (stage, grid side, depth), label flag, record count (`u64`). Each record
//! is a label byte when flagged, then every entry's grid values in order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::classifier::{KnnModel, SvmModel, SvmParams};
use crate::dataset::Cuboid;
use crate::error::{Error, Result};
use crate::features::{CoeffAddress, FeatureSpec, Setting};
use crate::linalg::{Matrix, PcaReducer};
use crate::multistage::{SaakModel, StageCoeffs};
use crate::stage::{KernelCap, StageKernels};

pub const MODEL_MAGIC: &[u8; 8] = b"SAAKMDL\0";
pub const FEATURE_MAGIC: &[u8; 8] = b"SAAKFEAT";
pub const CLASSIFIER_MAGIC: &[u8; 8] = b"SAAKCLSF";
pub const COEFF_MAGIC: &[u8; 8] = b"SAAKCOEF";
pub const FORMAT_VERSION: u32 = 1;

const CAP_ALL: u32 = u32::MAX;
const KIND_KNN: u32 = 1;
const KIND_SVM: u32 = 2;

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the file format")))
}

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        Ok(self.0.write_all(b)?)
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn usize(&mut self, v: usize) -> Result<()> {
        self.u32(to_u32(v)?)
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(8 * v.len());
        v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        self.bytes(&buf)
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        self.bytes(magic)?;
        self.u32(FORMAT_VERSION)
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.0.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("file is truncated".into()),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    /// A count that sizes an allocation; bounded to reject garbage early.
    fn count(&mut self, limit: usize, what: &str) -> Result<usize> {
        let n = self.usize()?;
        if n > limit {
            return Err(Error::Format(format!("{what} {n} exceeds {limit}")));
        }
        Ok(n)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .bytes(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.bytes(8)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.0.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after the last record".into())),
        }
    }
}

const MAX_DIM: usize = 1 << 24;

pub fn write_model<W: Write>(model: &SaakModel, out: W) -> Result<()> {
    let mut o = Out(out);
    o.header(MODEL_MAGIC)?;
    o.usize(model.stage_count())?;
    o.usize(model.side())?;
    o.usize(model.input_depth())?;
    for cap in model.caps() {
        o.u32(match cap {
            KernelCap::All => CAP_ALL,
            KernelCap::Max(m) => to_u32(*m)?,
        })?;
    }
    for s in model.stages() {
        let n = s.input_dim();
        o.usize(n)?;
        o.usize(s.ac_count())?;
        o.u64(s.sample_count())?;
        o.f64(s.dc_energy())?;
        o.f64(s.residual_energy())?;
        o.f64s(s.eigenvalues())?;
        o.f64s(&s.kernels().as_slice()[n..])?;
    }
    o.0.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(input: R) -> Result<SaakModel> {
    let mut r = In(input);
    r.header(MODEL_MAGIC)?;
    let p = r.count(16, "stage count")?;
    let side = r.count(1 << 16, "side")?;
    let depth = r.count(MAX_DIM, "input depth")?;
    let caps = (0..p)
        .map(|_| {
            Ok(match r.u32()? {
                CAP_ALL => KernelCap::All,
                m => KernelCap::Max(m as usize),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stages = Vec::with_capacity(p);
    for stage in 1..=p {
        let n = r.count(MAX_DIM, "stage input dimension")?;
        let m = r.count(n.saturating_sub(1), "AC kernel count")?;
        let samples = r.u64()?;
        let dc_energy = r.f64()?;
        let residual_energy = r.f64()?;
        let eigenvalues = r.f64s(m)?;
        let basis = r.f64s(m * n)?;
        stages.push(StageKernels::from_parts(
            stage,
            n,
            basis,
            eigenvalues,
            dc_energy,
            residual_energy,
            samples,
        )?);
    }
    r.finish()?;
    SaakModel::from_parts(side, depth, caps, stages)
}

pub fn write_feature_spec<W: Write>(spec: &FeatureSpec, out: W) -> Result<()> {
    let mut o = Out(out);
    o.header(FEATURE_MAGIC)?;
    o.u32(spec.setting().number() as u32)?;
    o.usize(spec.raw_dim())?;
    o.u32(spec.scores().is_some() as u32)?;
    o.usize(spec.reducer().map_or(0, PcaReducer::output_dim))?;
    for a in spec.addresses() {
        for v in [a.stage, a.row, a.col, a.channel] {
            o.usize(v)?;
        }
    }
    if let Some(s) = spec.scores() {
        o.f64s(s)?;
    }
    if let Some(red) = spec.reducer() {
        o.f64s(red.mean())?;
        o.f64s(red.eigenvalues())?;
        o.f64s(red.basis().as_slice())?;
    }
    o.0.flush()?;
    Ok(())
}

pub fn read_feature_spec<R: Read>(input: R) -> Result<FeatureSpec> {
    let mut r = In(input);
    r.header(FEATURE_MAGIC)?;
    let setting = Setting::try_from(u8::try_from(r.u32()?).unwrap_or(0)).map_err(|e| Error::Format(e.to_string()))?;
    let n = r.count(MAX_DIM, "address count")?;
    let has_scores = match r.u32()? {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad score flag {f}"))),
    };
    let reduced = r.count(n, "reduced dimension")?;
    let addresses = (0..n)
        .map(|_| {
            Ok(CoeffAddress {
                stage: r.usize()?,
                row: r.usize()?,
                col: r.usize()?,
                channel: r.usize()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = if has_scores { Some(r.f64s(n)?) } else { None };
    let reducer = if reduced > 0 {
        let mean = r.f64s(n)?;
        let eigenvalues = r.f64s(reduced)?;
        let basis = Matrix::from_vec(reduced, n, r.f64s(reduced * n)?)?;
        Some(PcaReducer::from_parts(mean, basis, eigenvalues)?)
    } else {
        None
    };
    r.finish()?;
    FeatureSpec::from_parts(setting, addresses, scores, reducer)
}

/// A trained classifier of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierModel {
    Knn(KnnModel),
    Svm(SvmModel),
}

impl ClassifierModel {
    pub fn as_classifier(&self) -> &dyn crate::classifier::Classifier {
        match self {
            ClassifierModel::Knn(m) => m,
            ClassifierModel::Svm(m) => m,
        }
    }
}

pub fn write_classifier<W: Write>(model: &ClassifierModel, out: W) -> Result<()> {
    let mut o = Out(out);
    o.header(CLASSIFIER_MAGIC)?;
    match model {
        ClassifierModel::Knn(knn) => {
            o.u32(KIND_KNN)?;
            o.usize(knn.k())?;
            o.usize(knn.train().rows())?;
            o.usize(knn.train().cols())?;
            o.bytes(knn.labels())?;
            o.f64s(knn.train().as_slice())?;
        }
        ClassifierModel::Svm(svm) => {
            let p = svm.params();
            o.u32(KIND_SVM)?;
            o.usize(svm.weights().rows())?;
            o.usize(svm.weights().cols())?;
            o.f64(p.lambda)?;
            o.usize(p.epochs)?;
            o.u64(p.seed)?;
            o.f64(p.eta0)?;
            o.f64s(svm.mean())?;
            o.f64s(svm.scale())?;
            o.f64s(svm.weights().as_slice())?;
            o.f64s(svm.bias())?;
        }
    }
    o.0.flush()?;
    Ok(())
}

pub fn read_classifier<R: Read>(input: R) -> Result<ClassifierModel> {
    let mut r = In(input);
    r.header(CLASSIFIER_MAGIC)?;
    let model = match r.u32()? {
        KIND_KNN => {
            let k = r.count(MAX_DIM, "K")?;
            let rows = r.count(MAX_DIM, "training rows")?;
            let dim = r.count(MAX_DIM, "feature dimension")?;
            let labels = r.bytes(rows)?;
            let train = Matrix::from_vec(rows, dim, r.f64s(rows * dim)?)?;
            ClassifierModel::Knn(KnnModel::new(k, train, labels)?)
        }
        KIND_SVM => {
            let classes = r.count(256, "class count")?;
            let dim = r.count(MAX_DIM, "feature dimension")?;
            let lambda = r.f64()?;
            let epochs = r.usize()?;
            let seed = r.u64()?;
            let eta0 = r.f64()?;
            let mean = r.f64s(dim)?;
            let scale = r.f64s(dim)?;
            let weights = Matrix::from_vec(classes, dim, r.f64s(classes * dim)?)?;
            let bias = r.f64s(classes)?;
            let params = SvmParams {
                lambda,
                epochs,
                seed,
                eta0,
            };
            ClassifierModel::Svm(SvmModel::from_parts(mean, scale, weights, bias, params)?)
        }
        k => return Err(Error::Format(format!("unknown classifier kind {k}"))),
    };
    r.finish()?;
    Ok(model)
}

/// Shape of one stage grid inside a coefficient dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpEntry {
    pub stage: usize,
    pub side: usize,
    pub depth: usize,
}

impl DumpEntry {
    fn len(&self) -> usize {
        self.side * self.side * self.depth
    }
}

/// Which stages a dump holds for `model`.
pub fn dump_entries(model: &SaakModel, last_only: bool) -> Vec<DumpEntry> {
    let first = if last_only { model.stage_count() } else { 1 };
    (first..=model.stage_count())
        .map(|p| DumpEntry {
            stage: p,
            side: model.grid_side(p),
            depth: model.stage(p).signed_dim(),
        })
        .collect()
}

/// Streaming coefficient-dump writer. The record count is fixed up front.
pub struct CoeffDumpWriter<W: Write> {
    out: Out<W>,
    entries: Vec<DumpEntry>,
    labeled: bool,
    remaining: u64,
}

impl<W: Write> CoeffDumpWriter<W> {
    pub fn new(out: W, entries: Vec<DumpEntry>, labeled: bool, records: u64) -> Result<Self> {
        let mut o = Out(out);
        o.header(COEFF_MAGIC)?;
        o.usize(entries.len())?;
        for e in &entries {
            o.usize(e.stage)?;
            o.usize(e.side)?;
            o.usize(e.depth)?;
        }
        o.u32(labeled as u32)?;
        o.u64(records)?;
        Ok(CoeffDumpWriter {
            out: o,
            entries,
            labeled,
            remaining: records,
        })
    }

    pub fn push(&mut self, coeffs: &StageCoeffs, label: Option<u8>) -> Result<()> {
        if self.remaining == 0 {
            return Err(Error::invalid("more records than declared"));
        }
        match (self.labeled, label) {
            (true, Some(l)) => self.out.bytes(&[l])?,
            (false, None) => {}
            _ => return Err(Error::invalid("label presence differs from the dump header")),
        }
        for e in &self.entries {
            let g = coeffs.stage(e.stage);
            Error::check_dim(e.len(), g.len())?;
            self.out.f64s(g.values())?;
        }
        self.remaining -= 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.remaining != 0 {
            return Err(Error::invalid(format!(
                "{} declared records were not written",
                self.remaining
            )));
        }
        self.out.0.flush()?;
        Ok(self.out.0)
    }
}

/// One record of a coefficient dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub label: Option<u8>,
    /// One grid per dump entry.
    pub grids: Vec<Cuboid>,
}

/// Streaming coefficient-dump reader; iterate to get records.
pub struct CoeffDumpReader<R: Read> {
    input: In<R>,
    entries: Vec<DumpEntry>,
    labeled: bool,
    remaining: u64,
}

impl<R: Read> CoeffDumpReader<R> {
    pub fn new(input: R) -> Result<Self> {
        let mut r = In(input);
        r.header(COEFF_MAGIC)?;
        let e = r.count(16, "stage entry count")?;
        let entries = (0..e)
            .map(|_| {
                Ok(DumpEntry {
                    stage: r.usize()?,
                    side: r.count(1 << 16, "grid side")?,
                    depth: r.count(MAX_DIM, "grid depth")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let labeled = r.u32()? != 0;
        let remaining = r.u64()?;
        Ok(CoeffDumpReader {
            input: r,
            entries,
            labeled,
            remaining,
        })
    }

    pub fn entries(&self) -> &[DumpEntry] {
        &self.entries
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    fn next_record(&mut self) -> Result<DumpRecord> {
        let label = if self.labeled {
            Some(self.input.bytes(1)?[0])
        } else {
            None
        };
        let grids = self
            .entries
            .iter()
            .map(|e| Cuboid::new(e.side, e.side, e.depth, self.input.f64s(e.len())?))
            .collect::<Result<_>>()?;
        self.remaining -= 1;
        Ok(DumpRecord { label, grids })
    }
}

impl<R: Read> Iterator for CoeffDumpReader<R> {
    type Item = Result<DumpRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        (self.remaining > 0).then(|| self.next_record())
    }
}

/// Writes a single-channel image as binary PGM. Values are in `[0, 1]`
/// units; they are clamped, scaled by 255 and rounded.
pub fn write_pgm<W: Write>(image: &Cuboid, mut out: W) -> Result<()> {
    if image.depth() != 1 {
        return Err(Error::invalid(format!("PGM needs one channel, got {}", image.depth())));
    }
    write!(out, "P5\n{} {}\n255\n", image.width(), image.height())?;
    let bytes: Vec<u8> = image
        .values()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn save<T: ?Sized>(path: &Path, value: &T, write: impl FnOnce(&T, BufWriter<File>) -> Result<()>) -> Result<()> {
    write(value, BufWriter::new(File::create(path)?))
}

pub fn load<T>(path: &Path, read: impl FnOnce(BufReader<File>) -> Result<T>) -> Result<T> {
    read(BufReader::new(File::open(path)?))
}
