//! On-disk formats: `.emb` embeddings, PNG/PPM images, trajectory and report
//! directories, CSV tables.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encode::{GeneratorConfig, PromptText};
use crate::error::{Error, Result};
use crate::feedback::{SessionEvent, SessionLog};
use crate::generator::{Generator, ImageTensor};
use crate::geometry::{lerp, nlerp, slerp, Latent, PromptEmbedding};
use crate::optimize::{OptimizeConfig, SeedEvaluation, Snapshot, SubspacePoint, Trajectory};
use crate::seedinv::SeedInvReport;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
const EMB_HEADER: usize = 12;

pub fn emb_bytes(e: &PromptEmbedding) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMB_HEADER + 4 * e.data().len());
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(e.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(e.dim() as u32).to_le_bytes());
    for v in e.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn parse_emb(path: &Path, bytes: &[u8]) -> Result<PromptEmbedding> {
    if bytes.len() < 4 || &bytes[..4] != EMB_MAGIC {
        return Err(Error::EmbMagic { path: path.into() });
    }
    if bytes.len() < EMB_HEADER {
        return Err(Error::EmbTruncated {
            path: path.into(),
            expected: EMB_HEADER,
            found: bytes.len(),
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = EMB_HEADER + 4 * rows * dim;
    if bytes.len() < expected {
        return Err(Error::EmbTruncated {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected || rows == 0 || dim == 0 {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("{rows}x{dim} header does not match {} bytes", bytes.len()),
        });
    }
    let data = bytes[EMB_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    PromptEmbedding::new(rows, dim, data).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })
}

pub fn write_emb(path: impl AsRef<Path>, e: &PromptEmbedding) -> Result<()> {
    fs::write(path, emb_bytes(e))?;
    Ok(())
}

pub fn read_emb(path: impl AsRef<Path>) -> Result<PromptEmbedding> {
    let path = path.as_ref();
    parse_emb(path, &fs::read(path)?)
}

/// Reads an embedding and checks it has the generator's `T x D` shape.
pub fn read_emb_for(path: impl AsRef<Path>, cfg: &GeneratorConfig) -> Result<PromptEmbedding> {
    let path = path.as_ref();
    let e = read_emb(path)?;
    if e.rows() != cfg.tokens || e.dim() != cfg.dim {
        return Err(Error::EmbDims {
            path: path.into(),
            expected_rows: cfg.tokens,
            expected_dim: cfg.dim,
            rows: e.rows(),
            dim: e.dim(),
        });
    }
    Ok(e)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved 8-bit RGB. Images with other channel counts are rejected.
pub fn rgb8(image: &ImageTensor) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::ImageSize {
            height: image.height(),
            width: image.width(),
            reason: "RGB export needs 3 channels",
        });
    }
    Ok(image.data().iter().map(|&v| quantize(v)).collect())
}

pub fn png_bytes(image: &ImageTensor) -> Result<Vec<u8>> {
    let pixels = rgb8(image)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&pixels)?;
        w.finish()?;
    }
    Ok(out)
}

pub fn ppm_bytes(image: &ImageTensor) -> Result<Vec<u8>> {
    let pixels = rgb8(image)?;
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_image_png(path: impl AsRef<Path>, image: &ImageTensor) -> Result<()> {
    fs::write(path, png_bytes(image)?)?;
    Ok(())
}

pub fn write_image_ppm(path: impl AsRef<Path>, image: &ImageTensor) -> Result<()> {
    fs::write(path, ppm_bytes(image)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMethod {
    Lerp,
    Nlerp,
    Slerp,
}

impl InterpMethod {
    pub fn apply(self, a: &PromptEmbedding, b: &PromptEmbedding, t: f64) -> Result<PromptEmbedding> {
        match self {
            InterpMethod::Lerp => lerp(a, b, t),
            InterpMethod::Nlerp => nlerp(a, b, t),
            InterpMethod::Slerp => slerp(a, b, t),
        }
    }
}

impl FromStr for InterpMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lerp" => Ok(InterpMethod::Lerp),
            "nlerp" => Ok(InterpMethod::Nlerp),
            "slerp" => Ok(InterpMethod::Slerp),
            other => Err(format!("unknown interpolation method `{other}` (lerp, nlerp, slerp)")),
        }
    }
}

/// `t_i = i / (steps - 1)` for `i in 0..steps`; the last value is exactly 1.
pub fn strip_params(steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|i| if i + 1 == steps { 1.0 } else { i as f64 / (steps - 1) as f64 })
        .collect()
}

/// Renders `steps` images along the path from `a` to `b` with a fixed latent.
pub fn interpolation_strip(
    gen: &Generator,
    a: &PromptEmbedding,
    b: &PromptEmbedding,
    z: &Latent,
    steps: usize,
    method: InterpMethod,
) -> Result<Vec<ImageTensor>> {
    if steps < 2 {
        return Err(Error::invalid("steps", format!("{steps} < 2")));
    }
    strip_params(steps)
        .into_iter()
        .map(|t| gen.generate(&method.apply(a, b, t)?, z))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TrajectoryMeta {
    prompt: String,
    config: OptimizeConfig,
    iterations: Vec<usize>,
    band_exits: Vec<usize>,
}

pub fn snapshot_file_name(iteration: usize) -> String {
    format!("snapshot_{iteration:05}.emb")
}

/// Writes `trajectory.csv` (iteration, value), one `.emb` per snapshot and
/// `trajectory.json` with the configuration.
pub fn write_trajectory_dir(dir: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("trajectory.csv"))?;
    w.write_record(["iteration", traj.config.metric.name()])?;
    for s in &traj.snapshots {
        w.write_record([s.iteration.to_string(), s.value.to_string()])?;
        write_emb(dir.join(snapshot_file_name(s.iteration)), &s.embedding)?;
    }
    w.flush()?;
    let meta = TrajectoryMeta {
        prompt: traj.prompt.as_str().to_string(),
        config: traj.config.clone(),
        iterations: traj.snapshots.iter().map(|s| s.iteration).collect(),
        band_exits: traj.band_exits.clone(),
    };
    fs::write(dir.join("trajectory.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Inverse of [`write_trajectory_dir`]; snapshot embeddings come back at
/// 32-bit precision.
pub fn read_trajectory_dir(dir: impl AsRef<Path>) -> Result<Trajectory> {
    let dir = dir.as_ref();
    let meta_path = dir.join("trajectory.json");
    let meta: TrajectoryMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    let csv_path = dir.join("trajectory.csv");
    let mut r = csv::Reader::from_path(&csv_path)?;
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse_err = |what: &str| Error::Format {
            path: csv_path.clone(),
            reason: format!("bad {what} in row {:?}", rec),
        };
        let it: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| parse_err("iteration"))?;
        let v: f64 = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| parse_err("value"))?;
        values.push((it, v));
    }
    if values.iter().map(|p| p.0).ne(meta.iterations.iter().copied()) {
        return Err(Error::Format {
            path: csv_path,
            reason: "iterations disagree with trajectory.json".into(),
        });
    }
    let snapshots = values
        .into_iter()
        .map(|(iteration, value)| {
            Ok(Snapshot {
                iteration,
                embedding: read_emb(dir.join(snapshot_file_name(iteration)))?,
                value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        prompt: PromptText::new(meta.prompt),
        config: meta.config,
        snapshots,
        band_exits: meta.band_exits,
    })
}

/// Header `iteration,seed_<s1>,...,mean,std`; one row per snapshot.
pub fn write_evaluation_csv(path: impl AsRef<Path>, eval: &SeedEvaluation) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string()];
    header.extend(eval.seeds.iter().map(|s| format!("seed_{s}")));
    header.extend(["mean".to_string(), "std".to_string()]);
    w.write_record(&header)?;
    for (i, row) in eval.values.iter().enumerate() {
        let mut rec = vec![eval.iterations[i].to_string()];
        rec.extend(row.iter().map(f64::to_string));
        rec.push(eval.mean[i].to_string());
        rec.push(eval.std[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `steps.csv`, `validation.csv`, `report.json` and `final.emb`.
pub fn write_seedinv_dir(
    dir: impl AsRef<Path>,
    final_embedding: &PromptEmbedding,
    report: &SeedInvReport,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("steps.csv"))?;
    w.write_record(["step", "alpha", "loss"])?;
    for s in &report.steps {
        w.write_record([s.step.to_string(), s.alpha.to_string(), s.loss.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("validation.csv"))?;
    w.write_record(["seed", "baseline", "result"])?;
    for r in &report.validation {
        w.write_record([r.seed.to_string(), r.baseline.to_string(), r.result.to_string()])?;
    }
    w.flush()?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    write_emb(dir.join("final.emb"), final_embedding)?;
    Ok(())
}

pub fn write_subspace_csv(path: impl AsRef<Path>, points: &[SubspacePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["alpha", "beta", "loss", "baseline"])?;
    for p in points {
        w.write_record([
            p.alpha.to_string(),
            p.beta.to_string(),
            p.loss.to_string(),
            p.baseline.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `log.jsonl` plus one `<hash>.emb` sidecar per referenced embedding.
pub fn write_session_dir(dir: impl AsRef<Path>, log: &SessionLog) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let log_path = dir.join("log.jsonl");
    let mut f = BufWriter::new(File::create(&log_path)?);
    f.write_all(log.to_jsonl()?.as_bytes())?;
    f.flush()?;
    let mut written = vec![log_path];
    for (hash, e) in log.sidecars() {
        let p = dir.join(format!("{hash}.emb"));
        write_emb(&p, e)?;
        written.push(p);
    }
    Ok(written)
}

pub fn read_session_log(path: impl AsRef<Path>) -> Result<Vec<SessionEvent>> {
    SessionLog::parse_jsonl(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb() -> PromptEmbedding {
        PromptEmbedding::new(2, 3, vec![0.1, -0.2, 0.3, 1.5, 2.0, -3.25]).unwrap()
    }

    #[test]
    fn emb_layout() {
        let b = emb_bytes(&emb());
        assert_eq!(b.len(), 12 + 4 * 6);
        assert_eq!(&b[..4], b"EMB1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &3u32.to_le_bytes());
        assert_eq!(&b[12..16], &0.1f32.to_le_bytes());
    }

    #[test]
    fn emb_errors_are_distinct() {
        let p = Path::new("x.emb");
        let mut b = emb_bytes(&emb());
        assert!(matches!(parse_emb(p, &b[..b.len() - 1]), Err(Error::EmbTruncated { .. })));
        assert!(matches!(parse_emb(p, &b[..7]), Err(Error::EmbTruncated { .. })));
        b[0] = b'X';
        assert!(matches!(parse_emb(p, &b), Err(Error::EmbMagic { .. })));
        assert!(matches!(parse_emb(p, b""), Err(Error::EmbMagic { .. })));
    }

    #[test]
    fn ppm_header() {
        let img = ImageTensor::filled(32, 32, 1.0);
        let b = ppm_bytes(&img).unwrap();
        let header = b"P6\n32 32\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(b.len() - header.len(), 3072);
        assert!(b[header.len()..].iter().all(|&v| v == 255));
    }

    #[test]
    fn quantization_rounds() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.499 / 255.0), 0);
    }

    #[test]
    fn strip_params_hit_endpoints() {
        assert_eq!(strip_params(2), vec![0.0, 1.0]);
        let p = strip_params(51);
        assert_eq!(p[0], 0.0);
        assert_eq!(p[50], 1.0);
        assert!((p[25] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("slerp".parse::<InterpMethod>().unwrap(), InterpMethod::Slerp);
        assert!("cubic".parse::<InterpMethod>().is_err());
    }
}
