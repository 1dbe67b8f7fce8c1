//! Grid-sampled `(x, u, Q(x, u))` datasets: parallel labeling, the `B̄`
//! admission filter and binary/CSV persistence.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::cbf_init::QuadraticCbf;
use crate::error::{Error, Result};
use crate::reach_gen::{eval_bk_below, eval_q, eval_q_below, GeneratorConfig};
use crate::sysmodel::{InputVec, StateVec, SystemFile};

const MAGIC: &[u8; 7] = b"SACBFDS";
pub const FORMAT_VERSION: u8 = 1;

/// One labeled tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTuple {
    pub x: StateVec,
    pub u: InputVec,
    pub q: f64,
}

/// Uniform grid over a box in `(x, u)` space; `x` coordinates come first.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub counts: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl GridSpec {
    pub fn new(counts: Vec<usize>, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if counts.len() != lo.len() || lo.len() != hi.len() {
            return Err(Error::Dimension(
                "grid counts and bounds differ in length".into(),
            ));
        }
        if counts.iter().any(|&c| c < 2) {
            return Err(Error::InvalidArgument(
                "every grid dimension needs at least two points".into(),
            ));
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| !(l.is_finite() && h.is_finite() && l <= h))
        {
            return Err(Error::InvalidArgument(
                "grid bounds must be finite with lo <= hi".into(),
            ));
        }
        Ok(Self { counts, lo, hi })
    }

    /// `count` points per axis on `|x1| <= 0.16, |x2| <= 1.1, |u| <= 4`.
    pub fn pendulum(count: usize) -> Result<Self> {
        Self::new(
            vec![count; 3],
            vec![-0.16, -1.1, -4.0],
            vec![0.16, 1.1, 4.0],
        )
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().product()
    }

    /// Grid point by linear index, last coordinate varying fastest.
    pub fn point(&self, index: usize) -> Vec<f64> {
        let mut rest = index;
        let mut z = vec![0.0; self.dim()];
        for d in (0..self.dim()).rev() {
            let n = self.counts[d];
            let i = rest % n;
            rest /= n;
            z[d] = self.lo[d] + (self.hi[d] - self.lo[d]) * i as f64 / (n - 1) as f64;
        }
        z
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.total()).map(|i| self.point(i)).collect()
    }
}

/// Which value must not exceed `B̄` for a tuple to be kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Admission {
    /// `Q(x, u) = B_k(f(x, u)) <= B̄`.
    #[default]
    NextState,
    /// `B_k(x) <= B̄`.
    CurrentState,
}

impl Admission {
    fn tag(self) -> u8 {
        match self {
            Admission::NextState => 0,
            Admission::CurrentState => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Admission::NextState),
            1 => Some(Admission::CurrentState),
            _ => None,
        }
    }
}

/// Serialized generator configuration carried with datasets and models.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigSnapshot {
    pub system: String,
    pub b0: String,
    pub k: usize,
}

impl ConfigSnapshot {
    pub fn of(cfg: &GeneratorConfig) -> Result<Self> {
        Ok(Self {
            system: SystemFile::from_parts(&cfg.sys, &cfg.cons, &cfg.input).render()?,
            b0: cfg.b0.to_text(),
            k: cfg.k,
        })
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        let (sys, cons, input) = SystemFile::parse(&self.system)?.build()?;
        GeneratorConfig::new(sys, cons, input, QuadraticCbf::from_text(&self.b0)?, self.k)
    }

    /// First 8 bytes of the SHA-256 of the canonical text.
    pub fn digest(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.system.as_bytes());
        h.update([0u8]);
        h.update(self.b0.as_bytes());
        h.update([0u8]);
        h.update((self.k as u64).to_le_bytes());
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("sha256 output has 32 bytes"))
    }
}

pub fn config_digest(cfg: &GeneratorConfig) -> Result<u64> {
    Ok(ConfigSnapshot::of(cfg)?.digest())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub n_x: usize,
    pub n_u: usize,
    pub samples: Vec<SampleTuple>,
    pub config: ConfigSnapshot,
    pub digest: u64,
    pub grid: GridSpec,
    pub b_bar: f64,
    pub admission: Admission,
    /// Tuples generated before admission.
    pub total: usize,
}

impl LabeledDataset {
    pub fn admitted(&self) -> usize {
        self.samples.len()
    }

    pub fn max_label(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.q)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        self.config.generator()
    }
}

/// Labels every grid point and keeps the tuples passing the admission filter.
pub fn build_labeled_dataset(
    cfg: &GeneratorConfig,
    grid: &GridSpec,
    b_bar: f64,
) -> Result<LabeledDataset> {
    build_labeled_dataset_with(cfg, grid, b_bar, Admission::NextState)
}

pub fn build_labeled_dataset_with(
    cfg: &GeneratorConfig,
    grid: &GridSpec,
    b_bar: f64,
    admission: Admission,
) -> Result<LabeledDataset> {
    let (n_x, n_u) = (cfg.sys.n_x(), cfg.sys.n_u());
    if grid.dim() != n_x + n_u {
        return Err(Error::Dimension(format!(
            "grid has {} axes, expected {}",
            grid.dim(),
            n_x + n_u
        )));
    }
    if b_bar.is_nan() {
        return Err(Error::NonFinite("admission threshold"));
    }
    let config = ConfigSnapshot::of(cfg)?;
    let digest = config.digest();
    let total = grid.total();
    let split = |z: &[f64]| {
        (
            DVector::from_column_slice(&z[..n_x]),
            DVector::from_column_slice(&z[n_x..]),
        )
    };
    // strictly above b_bar so that labels equal to it survive the strict search cutoff
    let cutoff = b_bar + 1e-12 * (1.0 + b_bar.abs());
    let label_err = |index: usize, x: &StateVec, u: &InputVec, e: Error| Error::Labeling {
        index,
        x: x.iter().copied().collect(),
        u: u.iter().copied().collect(),
        source: Box::new(e),
    };

    let samples: Vec<SampleTuple> = if b_bar == f64::NEG_INFINITY {
        Vec::new()
    } else {
        match admission {
            Admission::NextState => (0..total)
                .into_par_iter()
                .map(|i| {
                    let (x, u) = split(&grid.point(i));
                    let q =
                        eval_q_below(cfg, &x, &u, cutoff).map_err(|e| label_err(i, &x, &u, e))?;
                    Ok(q.filter(|&q| q <= b_bar).map(|q| SampleTuple { x, u, q }))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect(),
            Admission::CurrentState => {
                let per_state: usize = grid.counts[n_x..].iter().product();
                (0..total / per_state)
                    .into_par_iter()
                    .map(|s| {
                        let (x, u) = split(&grid.point(s * per_state));
                        let inside = eval_bk_below(cfg, &x, cutoff)
                            .map_err(|e| label_err(s * per_state, &x, &u, e))?
                            .is_some_and(|r| r.value <= b_bar);
                        if !inside {
                            return Ok(Vec::new());
                        }
                        (s * per_state..(s + 1) * per_state)
                            .map(|i| {
                                let (x, u) = split(&grid.point(i));
                                let q = eval_q(cfg, &x, &u).map_err(|e| label_err(i, &x, &u, e))?;
                                Ok(SampleTuple { x, u, q })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .flatten()
                    .collect()
            }
        }
    };
    Ok(LabeledDataset {
        n_x,
        n_u,
        samples,
        config,
        digest,
        grid: grid.clone(),
        b_bar,
        admission,
        total,
    })
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_text(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode_dataset(d: &LabeledDataset) -> Vec<u8> {
    let width = d.n_x + d.n_u + 1;
    let mut buf = Vec::with_capacity(
        256 + d.config.system.len() + d.config.b0.len() + 8 * width * d.samples.len(),
    );
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    put_u32(&mut buf, d.n_x as u32);
    put_u32(&mut buf, d.n_u as u32);
    put_u64(&mut buf, d.total as u64);
    put_u64(&mut buf, d.samples.len() as u64);
    put_f64(&mut buf, d.b_bar);
    buf.push(d.admission.tag());
    put_u64(&mut buf, d.digest);
    put_u32(&mut buf, d.grid.dim() as u32);
    for i in 0..d.grid.dim() {
        put_u64(&mut buf, d.grid.counts[i] as u64);
        put_f64(&mut buf, d.grid.lo[i]);
        put_f64(&mut buf, d.grid.hi[i]);
    }
    put_u64(&mut buf, d.config.k as u64);
    put_text(&mut buf, &d.config.system);
    put_text(&mut buf, &d.config.b0);
    for s in &d.samples {
        for v in s.x.iter().chain(s.u.iter()) {
            put_f64(&mut buf, *v);
        }
        put_f64(&mut buf, s.q);
    }
    buf
}

pub fn save_dataset(d: &LabeledDataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_dataset(d))?;
    f.flush()?;
    Ok(())
}

/// Little-endian reader that reports byte offsets on failure.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                message: format!(
                    "truncated while reading {what} ({} bytes needed at offset {})",
                    n, self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("length checked"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("length checked"),
        ))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("length checked"),
        ))
    }

    fn size(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| self.error(at, format!("{what} {v} does not fit in memory")))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let len = self.size(what)?;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|e| {
            self.error(
                at + e.utf8_error().valid_up_to(),
                format!("{what} is not UTF-8"),
            )
        })
    }

    fn error(&self, offset: usize, message: String) -> Error {
        Error::Parse { offset, message }
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(c.error(0, "bad magic, not a dataset file".into()));
    }
    let version = c.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version.into(),
            expected: FORMAT_VERSION.into(),
        });
    }
    let n_x = c.u32("n_x")? as usize;
    let n_u = c.u32("n_u")? as usize;
    let total = c.size("total count")?;
    let admitted = c.size("admitted count")?;
    let b_bar = c.f64("admission threshold")?;
    let at = c.pos;
    let admission = Admission::from_tag(c.u8("admission rule")?)
        .ok_or_else(|| c.error(at, "unknown admission rule".into()))?;
    let digest = c.u64("config digest")?;
    let at = c.pos;
    let dims = c.u32("grid dimension")? as usize;
    if dims != n_x + n_u {
        return Err(c.error(at, format!("grid has {dims} axes, expected {}", n_x + n_u)));
    }
    let mut counts = Vec::with_capacity(dims);
    let mut lo = Vec::with_capacity(dims);
    let mut hi = Vec::with_capacity(dims);
    for _ in 0..dims {
        counts.push(c.size("grid count")?);
        lo.push(c.f64("grid lower bound")?);
        hi.push(c.f64("grid upper bound")?);
    }
    let k = c.size("horizon")?;
    let system = c.text("system description")?;
    let b0 = c.text("initial barrier")?;
    let width = n_x + n_u + 1;
    let body = admitted
        .checked_mul(8 * width)
        .ok_or_else(|| c.error(c.pos, "sample count overflows".into()))?;
    let start = c.pos;
    let rows = c.take(body, "sample rows")?;
    if c.pos != bytes.len() {
        return Err(c.error(
            c.pos,
            format!("{} trailing bytes after sample rows", bytes.len() - c.pos),
        ));
    }
    let samples = rows
        .chunks_exact(8 * width)
        .map(|row| {
            let v: Vec<f64> = row
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            SampleTuple {
                x: DVector::from_column_slice(&v[..n_x]),
                u: DVector::from_column_slice(&v[n_x..n_x + n_u]),
                q: v[n_x + n_u],
            }
        })
        .collect();
    let config = ConfigSnapshot { system, b0, k };
    if config.digest() != digest {
        return Err(c.error(
            start,
            "stored config digest does not match the stored config".into(),
        ));
    }
    Ok(LabeledDataset {
        n_x,
        n_u,
        samples,
        config,
        digest,
        grid: GridSpec { counts, lo, hi },
        b_bar,
        admission,
        total,
    })
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// Header row plus one row per sample with shortest round-trip decimals.
pub fn export_csv(d: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (1..=d.n_x)
        .map(|i| format!("x{i}"))
        .chain((1..=d.n_u).map(|i| format!("u{i}")))
        .chain(std::iter::once("q".to_string()))
        .collect();
    w.write_record(&header)?;
    for s in &d.samples {
        let row: Vec<String> =
            s.x.iter()
                .chain(s.u.iter())
                .chain(std::iter::once(&s.q))
                .map(|v| v.to_string())
                .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf_init::{synthesize_b0, CbfOption, InitOptions};
    use crate::sysmodel::pendulum_build;

    fn generator() -> GeneratorConfig {
        let (sys, cons, input) = pendulum_build();
        let b0 = synthesize_b0(
            &sys,
            &cons,
            &input,
            &InitOptions::pendulum(CbfOption::Plain),
        )
        .unwrap()
        .cbf;
        GeneratorConfig::new(sys, cons, input, b0, 2).unwrap()
    }

    fn small(cfg: &GeneratorConfig) -> LabeledDataset {
        let grid =
            GridSpec::new(vec![3, 3, 3], vec![-0.1, -0.5, -4.0], vec![0.1, 0.5, 4.0]).unwrap();
        build_labeled_dataset(cfg, &grid, 10.0).unwrap()
    }

    #[test]
    fn grid_indexing_covers_box_corners() {
        let g = GridSpec::new(vec![2, 3], vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(g.total(), 6);
        assert_eq!(g.point(0), vec![0.0, -1.0]);
        assert_eq!(g.point(1), vec![0.0, 0.0]);
        assert_eq!(g.point(5), vec![1.0, 1.0]);
        assert!(GridSpec::new(vec![1, 3], vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn build_keeps_labels_below_threshold_and_round_trips() {
        let cfg = generator();
        let d = small(&cfg);
        assert_eq!(d.total, 27);
        assert!(d.admitted() > 0 && d.admitted() <= 27);
        assert!(d.max_label() <= 10.0);
        let origin = d
            .samples
            .iter()
            .find(|s| s.x.norm() == 0.0 && s.u[0] == 0.0)
            .unwrap();
        assert!((origin.q + 1.0).abs() < 1e-9);
        for s in &d.samples {
            assert!((eval_q(&cfg, &s.x, &s.u).unwrap() - s.q).abs() <= 1e-9);
        }
        let back = decode_dataset(&encode_dataset(&d)).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.digest, config_digest(&cfg).unwrap());
        assert_eq!(back.generator().unwrap().b0, cfg.b0);

        let empty = build_labeled_dataset(&cfg, &d.grid, f64::NEG_INFINITY).unwrap();
        assert_eq!(empty.admitted(), 0);
        assert_eq!(empty.total, 27);
    }

    #[test]
    fn current_state_admission_keeps_whole_input_slices() {
        let cfg = generator();
        let grid =
            GridSpec::new(vec![3, 3, 2], vec![-0.1, -0.5, -4.0], vec![0.1, 0.5, 4.0]).unwrap();
        let d = build_labeled_dataset_with(&cfg, &grid, 0.0, Admission::CurrentState).unwrap();
        assert_eq!(d.admitted() % 2, 0);
        for s in &d.samples {
            assert!(crate::reach_gen::eval_bk(&cfg, &s.x).unwrap().value <= 0.0);
        }
    }

    #[test]
    fn malformed_files_report_offsets() {
        let cfg = generator();
        let bytes = encode_dataset(&small(&cfg));
        let cut = bytes.len() - 5;
        match decode_dataset(&bytes[..cut]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, cut),
            other => panic!("unexpected {other:?}"),
        }
        let mut wrong = bytes.clone();
        wrong[7] = 9;
        match decode_dataset(&wrong) {
            Err(
                e @ Error::Version {
                    found: 9,
                    expected: 1,
                },
            ) => {
                let msg = e.to_string();
                assert!(msg.contains('9') && msg.contains('1'));
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn csv_export_has_header_and_exact_values() {
        let cfg = generator();
        let d = small(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        export_csv(&d, &path).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        assert_eq!(
            r.headers().unwrap().iter().collect::<Vec<_>>(),
            vec!["x1", "x2", "u1", "q"]
        );
        let rows: Vec<csv::StringRecord> =
            r.records().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(rows.len(), d.admitted());
        for (row, s) in rows.iter().zip(&d.samples) {
            assert_eq!(row[3].parse::<f64>().unwrap().to_bits(), s.q.to_bits());
        }
    }
}
