//! Little-endian binary formats.
//!
//! Dataset (`.spdd`):
//!
//! ```text
//! "SPDD" | version u32 | N u32 | d u32 | C u32 | N × (label u32, d² f64 row-major)
//! ```
//!
//! Model (`.spdm`):
//!
//! ```text
//! "SPDM" | version u32 | config block | tensors
//! config: k+1 u32, backbone dims (k+1) × u32, E u32, d_down u32, C u32,
//!         eps f64, lambda1 f64, lambda2 f64,
//!         attention u32, lem grad u32, smx grad u32, phi u32, strict u32
//! tensor: rows u32, cols u32, rows·cols f64 row-major
//! ```
//!
//! Tensors follow [`ModelState::tensors`] order. The FC input size is the
//! full `d_down²` row-major flattening of the log-domain hidden state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use smsa_core::attention::{AttentionGradConfig, AttentionMode, GradMode};
use smsa_core::data::SpdDataset;
use smsa_core::layers::{EigGradOptions, PhiMode};
use smsa_core::network::{ModelState, NetworkConfig};
use smsa_core::optim::Sample;
use smsa_core::{Mat, SpdMatrix};

use crate::error::{CliError, CliResult};

pub const DATASET_MAGIC: &[u8; 4] = b"SPDD";
pub const MODEL_MAGIC: &[u8; 4] = b"SPDM";
pub const DATASET_VERSION: u32 = 1;
pub const MODEL_VERSION: u32 = 1;

/// Sanity cap on any dimension or count read from disk.
const MAX_DIM: u32 = 1 << 16;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    fn usize(&mut self, v: usize) -> std::io::Result<()> {
        let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
        self.u32(v)
    }
}

struct Reader<'a, R: Read> {
    inner: R,
    offset: u64,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn fail(&self, offset: u64, reason: impl Into<String>) -> CliError {
        CliError::Format {
            path: self.path.to_path_buf(),
            offset,
            reason: reason.into(),
        }
    }

    fn bytes<const N: usize>(&mut self) -> CliResult<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.fail(self.offset, "truncated file")
            } else {
                CliError::io(self.path, e)
            }
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> CliResult<()> {
        let m = self.bytes::<4>()?;
        if &m != expected {
            return Err(self.fail(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&m),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn bounded(&mut self, what: &str) -> CliResult<usize> {
        let at = self.offset;
        let v = self.u32()?;
        if v > MAX_DIM {
            return Err(self.fail(at, format!("{what} = {v} is implausibly large")));
        }
        Ok(v as usize)
    }

    fn version(&mut self, expected: u32) -> CliResult<()> {
        let at = self.offset;
        let v = self.u32()?;
        if v != expected {
            return Err(self.fail(at, format!("unsupported version {v}, expected {expected}")));
        }
        Ok(())
    }

    fn end(&mut self) -> CliResult<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.fail(self.offset, "trailing bytes after the last record")),
            Err(e) => Err(CliError::io(self.path, e)),
        }
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

pub fn write_dataset_to<W: Write>(out: W, data: &SpdDataset) -> std::io::Result<()> {
    let mut w = Writer { inner: out };
    w.inner.write_all(DATASET_MAGIC)?;
    w.u32(DATASET_VERSION)?;
    w.usize(data.len())?;
    w.usize(data.dim())?;
    w.usize(data.classes())?;
    for s in data.items() {
        w.u32(s.label)?;
        for &v in s.x.as_mat().as_slice() {
            w.f64(v)?;
        }
    }
    w.inner.flush()
}

pub fn write_dataset(path: &Path, data: &SpdDataset) -> CliResult<()> {
    write_dataset_to(create(path)?, data).map_err(|e| CliError::io(path, e))
}

/// Reads a dataset, re-validating every matrix as SPD and every label.
pub fn read_dataset(path: &Path) -> CliResult<SpdDataset> {
    let mut r = Reader {
        inner: open(path)?,
        offset: 0,
        path,
    };
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let n = r.u32()? as usize;
    let d = r.bounded("d")?;
    let c = r.bounded("C")?;
    if d == 0 {
        return Err(r.fail(12, "matrix dimension is zero"));
    }
    let mut items = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let at = r.offset;
        let label = r.u32()?;
        if label == 0 || label as usize > c {
            return Err(r.fail(at, format!("item {i}: label {label} outside 1..={c}")));
        }
        let mut data = Vec::with_capacity(d * d);
        for _ in 0..d * d {
            data.push(r.f64()?);
        }
        let x = SpdMatrix::new(Mat::from_vec(d, d, data))
            .map_err(|e| r.fail(at + 4, format!("item {i}: {e}")))?;
        items.push(Sample { x, label });
    }
    r.end()?;
    Ok(SpdDataset::new(d, c, items)?)
}

fn attention_code(m: AttentionMode) -> u32 {
    match m {
        AttentionMode::Smsa => 0,
        AttentionMode::Eusa => 1,
        AttentionMode::None => 2,
    }
}

fn grad_code(m: GradMode) -> u32 {
    match m {
        GradMode::Exact => 0,
        GradMode::Paper => 1,
    }
}

fn phi_code(m: PhiMode) -> u32 {
    match m {
        PhiMode::Difference => 0,
        PhiMode::DifferenceOfSquares => 1,
    }
}

pub fn write_model_to<W: Write>(
    out: W,
    cfg: &NetworkConfig,
    state: &ModelState,
) -> std::io::Result<()> {
    let mut w = Writer { inner: out };
    w.inner.write_all(MODEL_MAGIC)?;
    w.u32(MODEL_VERSION)?;
    w.usize(cfg.backbone.len())?;
    for &d in &cfg.backbone {
        w.usize(d)?;
    }
    w.usize(cfg.stages)?;
    w.usize(cfg.d_down)?;
    w.usize(cfg.classes)?;
    w.f64(cfg.eps)?;
    w.f64(cfg.lambda1)?;
    w.f64(cfg.lambda2)?;
    w.u32(attention_code(cfg.attention))?;
    w.u32(grad_code(cfg.grad.lem))?;
    w.u32(grad_code(cfg.grad.smx))?;
    w.u32(phi_code(cfg.grad.eig.phi))?;
    w.u32(u32::from(cfg.grad.eig.strict))?;
    for t in state.tensors() {
        w.usize(t.rows())?;
        w.usize(t.cols())?;
        for &v in t.as_slice() {
            w.f64(v)?;
        }
    }
    w.inner.flush()
}

pub fn write_model(path: &Path, cfg: &NetworkConfig, state: &ModelState) -> CliResult<()> {
    write_model_to(create(path)?, cfg, state).map_err(|e| CliError::io(path, e))
}

fn decode<T>(r: &Reader<'_, impl Read>, at: u64, what: &str, code: u32, table: &[T]) -> CliResult<T>
where
    T: Copy,
{
    table
        .get(code as usize)
        .copied()
        .ok_or_else(|| r.fail(at, format!("unknown {what} code {code}")))
}

pub fn read_model(path: &Path) -> CliResult<(NetworkConfig, ModelState)> {
    let mut r = Reader {
        inner: open(path)?,
        offset: 0,
        path,
    };
    r.magic(MODEL_MAGIC)?;
    r.version(MODEL_VERSION)?;
    let k = r.bounded("backbone length")?;
    let backbone = (0..k)
        .map(|_| r.bounded("backbone size"))
        .collect::<CliResult<Vec<_>>>()?;
    let stages = r.bounded("E")?;
    let d_down = r.bounded("d_down")?;
    let classes = r.bounded("C")?;
    let eps = r.f64()?;
    let lambda1 = r.f64()?;
    let lambda2 = r.f64()?;
    let code = |r: &mut Reader<'_, _>| -> CliResult<(u64, u32)> { Ok((r.offset, r.u32()?)) };
    let (at, c) = code(&mut r)?;
    let attention = decode(
        &r,
        at,
        "attention",
        c,
        &[
            AttentionMode::Smsa,
            AttentionMode::Eusa,
            AttentionMode::None,
        ],
    )?;
    let (at, c) = code(&mut r)?;
    let lem = decode(
        &r,
        at,
        "LEM gradient",
        c,
        &[GradMode::Exact, GradMode::Paper],
    )?;
    let (at, c) = code(&mut r)?;
    let smx = decode(
        &r,
        at,
        "SMX gradient",
        c,
        &[GradMode::Exact, GradMode::Paper],
    )?;
    let (at, c) = code(&mut r)?;
    let phi = decode(
        &r,
        at,
        "phi",
        c,
        &[PhiMode::Difference, PhiMode::DifferenceOfSquares],
    )?;
    let (at, c) = code(&mut r)?;
    let strict = decode(&r, at, "strict flag", c, &[false, true])?;
    let cfg = NetworkConfig {
        backbone,
        stages,
        d_down,
        classes,
        eps,
        lambda1,
        lambda2,
        attention,
        grad: AttentionGradConfig {
            lem,
            smx,
            eig: EigGradOptions { phi, strict },
        },
    };
    let config_end = r.offset;
    cfg.validate()
        .map_err(|e| r.fail(config_end, format!("invalid configuration block: {e}")))?;
    let count = cfg.backbone.len() - 1 + 4 * cfg.stages;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.bounded("rows")?;
        let cols = r.bounded("cols")?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64()?);
        }
        tensors.push(Mat::from_vec(rows, cols, data));
    }
    r.end()?;
    let state = ModelState::from_tensors(&cfg, tensors).map_err(|e| {
        r.fail(
            config_end,
            format!("parameters do not match the configuration: {e}"),
        )
    })?;
    Ok((cfg, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use smsa_core::data::synth_generate;
    use smsa_core::network::tiny_config;

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.spdd");
        let data = synth_generate(3, 3, 5, 1.5, 30, 4).unwrap();
        write_dataset(&p, &data).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back, data);
        let p2 = dir.path().join("d2.spdd");
        write_dataset(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_names_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.spdd");
        std::fs::write(&p, b"XPDD\x01\0\0\0").unwrap();
        match read_dataset(&p) {
            Err(CliError::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_dataset_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.spdd");
        let data = synth_generate(2, 1, 4, 1.0, 10, 1).unwrap();
        write_dataset(&p, &data).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&p), Err(CliError::Format { .. })));
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.spdm");
        let cfg = tiny_config(AttentionMode::Smsa);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let state = ModelState::init(&cfg, &mut rng).unwrap();
        write_model(&p, &cfg, &state).unwrap();
        let (cfg2, state2) = read_model(&p).unwrap();
        assert_eq!((&cfg2, &state2), (&cfg, &state));
        let p2 = dir.path().join("m2.spdm");
        write_model(&p2, &cfg2, &state2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }
}
