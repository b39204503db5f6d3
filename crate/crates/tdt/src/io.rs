//! On-disk interchange formats.
//!
//! Two binary containers, both little-endian and fully size-checked:
//!
//! - problem files (`TDTP`): header `magic, version, T, U, V, N_d` as u32,
//!   then `N_d` durations and `U` targets as u32, then the joint logits as
//!   f32 in row-major `(t, u, k)` order with `t` outermost;
//! - tensor files (`TDTT`): `magic, version, rank`, `rank` dims as u32,
//!   then the payload as f64, row-major.
//!
//! Joints are f32 on disk (typical model-export precision) while all math
//! runs in f64; gradients are exported at full f64 width for
//! cross-implementation diffing. Text outputs use `.` decimals, no
//! thousands separators, and `\n` line endings.

use crate::decode::{DecodeResult, DecodeSummary, EmissionStats};
use crate::duration::DurationSet;
use crate::error::{Result, TdtError};
use crate::grad::GradientBundle;
use crate::lattice::AlignmentPosterior;
use crate::problem::JointProblem;
use ndarray::{Array2, Array3};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

const PROBLEM_MAGIC: [u8; 4] = *b"TDTP";
const TENSOR_MAGIC: [u8; 4] = *b"TDTT";
const FORMAT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn need(&self, n: usize) -> Result<()> {
        if self.pos + n > self.bytes.len() {
            Err(TdtError::SizeMismatch {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            })
        } else {
            Ok(())
        }
    }

    fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn f32(&mut self) -> Result<f32> {
        self.need(4)?;
        let v = f32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64> {
        self.need(8)?;
        let v = f64::from_le_bytes(self.bytes[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        Ok(v)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        self.need(4)?;
        let found: [u8; 4] = self.bytes[self.pos..self.pos + 4].try_into().unwrap();
        self.pos += 4;
        if found != expected {
            return Err(TdtError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(TdtError::SizeMismatch {
                expected: self.pos as u64,
                actual: self.bytes.len() as u64,
            });
        }
        Ok(())
    }
}

fn as_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value)
        .map_err(|_| TdtError::InvalidArgument(format!("{what} = {value} exceeds u32 range")))
}

/// Write a problem file. The f32 payload is the precision boundary: values
/// round-trip bit-exactly, but joints created in f64 are narrowed.
pub fn write_problem(problem: &JointProblem, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&PROBLEM_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for dim in [
        problem.frames(),
        problem.target_len(),
        problem.vocab(),
        problem.durations().len(),
    ] {
        w.write_all(&as_u32(dim, "header field")?.to_le_bytes())?;
    }
    for d in problem.durations().iter() {
        w.write_all(&as_u32(d, "duration")?.to_le_bytes())?;
    }
    for &y in problem.targets() {
        w.write_all(&as_u32(y, "target")?.to_le_bytes())?;
    }
    for &x in problem.logits().iter() {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a problem file, checking magic, version, exact size, and the
/// structural invariants (strictly increasing durations, targets < V).
pub fn read_problem(path: &Path) -> Result<JointProblem> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor::new(&bytes);
    c.magic(PROBLEM_MAGIC)?;
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(TdtError::UnsupportedVersion(version));
    }
    let t_len = c.u32()? as usize;
    let u_len = c.u32()? as usize;
    let vocab = c.u32()? as usize;
    let n_d = c.u32()? as usize;
    let mut durations = Vec::with_capacity(n_d);
    for _ in 0..n_d {
        durations.push(c.u32()? as usize);
    }
    let mut targets = Vec::with_capacity(u_len);
    for _ in 0..u_len {
        targets.push(c.u32()? as usize);
    }
    let count = t_len * (u_len + 1) * (vocab + 1 + n_d);
    // check the payload size up front so truncation is reported as a size
    // mismatch, not a bad value
    c.need(count * 4)?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(c.f32()? as f64);
    }
    c.finish()?;
    let durations = DurationSet::new(durations)?;
    let logits = Array3::from_shape_vec((t_len, u_len + 1, vocab + 1 + n_d), data)
        .expect("length checked above");
    JointProblem::new(logits, targets, vocab, durations)
}

/// Write a tensor file (f64 payload).
pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let count: usize = dims.iter().product();
    if count != data.len() {
        return Err(TdtError::ShapeMismatch {
            what: "tensor payload",
            expected: dims.to_vec(),
            actual: vec![data.len()],
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&as_u32(dims.len(), "rank")?.to_le_bytes())?;
    for &d in dims {
        w.write_all(&as_u32(d, "dimension")?.to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a tensor file as (dims, row-major payload).
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor::new(&bytes);
    c.magic(TENSOR_MAGIC)?;
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(TdtError::UnsupportedVersion(version));
    }
    let rank = c.u32()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(c.u32()? as usize);
    }
    let count: usize = dims.iter().product();
    c.need(count * 8)?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(c.f64()?);
    }
    c.finish()?;
    Ok((dims, data))
}

fn write_tensor3(path: &Path, tensor: &Array3<f64>) -> Result<()> {
    let dims = [tensor.dim().0, tensor.dim().1, tensor.dim().2];
    let owned = tensor.as_standard_layout();
    write_tensor(path, &dims, owned.as_slice().expect("standard layout"))
}

/// Write a gradient bundle as two tensor files inside `dir`:
/// `token_logit_grad.tensor` and `duration_logit_grad.tensor`.
pub fn write_gradient_bundle(bundle: &GradientBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_tensor3(&dir.join("token_logit_grad.tensor"), &bundle.token_logit_grad)?;
    write_tensor3(
        &dir.join("duration_logit_grad.tensor"),
        &bundle.duration_logit_grad,
    )?;
    Ok(())
}

/// Write a matrix as CSV: one row per `t`, one column per `u`, natural-log
/// values. `-inf` entries print as `-inf`.
pub fn write_matrix_csv(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in matrix.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Write the normalized posterior as an 8-bit binary PGM heatmap.
///
/// The finite range `[min, 0]` maps linearly to `[0, 255]`; `-inf` states
/// render as 0 (black).
pub fn write_posterior_pgm(path: &Path, normalized: &Array2<f64>) -> Result<()> {
    let (h, w_) = normalized.dim();
    let min = normalized
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::min);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w_} {h}\n255\n")?;
    let mut pixels = Vec::with_capacity(h * w_);
    for v in normalized.iter() {
        let p = if !v.is_finite() || min == 0.0 {
            if *v == 0.0 {
                255u8
            } else {
                0u8
            }
        } else {
            (255.0 * (v - min) / (0.0 - min)).round().clamp(0.0, 255.0) as u8
        };
        pixels.push(p);
    }
    out.write_all(&pixels)?;
    out.flush()?;
    Ok(())
}

/// Posterior export: `alignment.csv` (normalized, log domain) plus
/// `alignment.pgm` inside `dir`.
pub fn write_posterior(posterior: &AlignmentPosterior, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_matrix_csv(&dir.join("alignment.csv"), &posterior.normalized)?;
    write_posterior_pgm(&dir.join("alignment.pgm"), &posterior.normalized)?;
    Ok(())
}

/// Loss trajectory as `step,loss` rows (step 0 is the initial loss).
pub fn write_loss_csv(path: &Path, trajectory: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,loss")?;
    for (step, loss) in trajectory.iter().enumerate() {
        writeln!(w, "{step},{loss}")?;
    }
    w.flush()?;
    Ok(())
}

/// Duration histogram as `duration,count` rows.
pub fn write_durations_csv(path: &Path, stats: &EmissionStats) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "duration,count")?;
    for (d, c) in &stats.duration_counts {
        writeln!(w, "{d},{c}")?;
    }
    w.flush()?;
    Ok(())
}

/// Decode result as a single JSON document.
pub fn write_decode_json(path: &Path, result: &DecodeResult) -> Result<()> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &DecodeSummary::of(result))?;
    Ok(())
}

/// One row of a sweep comparison table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub label: String,
    pub first_token_frame: Option<usize>,
    pub mean_duration: f64,
    pub final_loss: f64,
}

/// Sweep comparison as `label,first_token_frame,mean_duration,final_loss`
/// rows; an absent first token prints as an empty field.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "label,first_token_frame,mean_duration,final_loss")?;
    for r in rows {
        let frame = r
            .first_token_frame
            .map(|f| f.to_string())
            .unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.label, frame, r.mean_duration, r.final_loss)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    fn sample_problem() -> JointProblem {
        let durations = DurationSet::new(vec![0, 1, 2]).unwrap();
        let logits = Array3::from_shape_fn((3, 3, 6), |(i, j, k)| {
            (i as f64 - j as f64) * 0.25 + k as f64 * 0.125
        });
        JointProblem::new(logits, vec![1, 0], 2, durations).unwrap()
    }

    #[test]
    fn problem_round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.tdtp");
        let p2 = dir.path().join("b.tdtp");
        let problem = sample_problem();
        write_problem(&problem, &p1).unwrap();
        let loaded = read_problem(&p1).unwrap();
        assert_eq!(loaded.targets(), problem.targets());
        assert_eq!(loaded.durations(), problem.durations());
        // write → read → write reproduces the same bytes
        write_problem(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.tdtp");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_problem(&path),
            Err(TdtError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_a_size_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tdtp");
        let problem = sample_problem();
        write_problem(&problem, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_problem(&path),
            Err(TdtError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_a_size_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tdtp");
        write_problem(&sample_problem(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 4]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_problem(&path),
            Err(TdtError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn unsupported_version_is_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.tdtp");
        write_problem(&sample_problem(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_problem(&path),
            Err(TdtError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn invariant_violations_surface_from_the_reader() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("i.tdtp");
        write_problem(&sample_problem(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // header: magic(4) version(4) T(4) U(4) V(4) N_d(4) durations(3×4);
        // first target starts at offset 36
        bytes[36..40].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_problem(&path),
            Err(TdtError::InvalidTarget { .. })
        ));
    }

    #[test]
    fn tensor_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.tensor");
        let data = vec![0.5, -1.25, 3.0, f64::NEG_INFINITY, 0.0, 42.0];
        write_tensor(&path, &[1, 2, 3], &data).unwrap();
        let (dims, loaded) = read_tensor(&path).unwrap();
        assert_eq!(dims, vec![1, 2, 3]);
        assert_eq!(loaded.len(), data.len());
        for (a, b) in loaded.iter().zip(data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pgm_has_correct_header_and_range() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.pgm");
        let m = ndarray::array![[0.0, -1.0], [-2.0, f64::NEG_INFINITY]];
        write_posterior_pgm(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        let pixels = &bytes[bytes.len() - 4..];
        assert_eq!(pixels[0], 255); // value 0 → brightest
        assert_eq!(pixels[2], 0); // min finite → darkest
        assert_eq!(pixels[3], 0); // -inf → black
    }

    #[test]
    fn csv_is_locale_independent() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = ndarray::array![[0.5, -1.25], [f64::NEG_INFINITY, 2.0]];
        write_matrix_csv(&path, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "0.5,-1.25\n-inf,2\n");
    }
}
