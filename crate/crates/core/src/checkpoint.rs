//! Checkpoint directories.
//!
//! Layout: one parameter file per network per scale (`{net}_{scale}.param`),
//! `noise.param` with the fixed reconstruction noise, `manifest.toml` with the
//! schedule, noise levels and config, and the loss log `losses.csv`.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::ParameterSet;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::generation::NoisePlan;
use crate::losses::LossReport;
use crate::networks::{Net, NetSpec, ScaleNets};
use crate::pyramid::ScaleSchedule;
use crate::trainer::ModelBundle;

pub const MANIFEST: &str = "manifest.toml";
pub const LOSS_LOG: &str = "losses.csv";
pub const NOISE_FILE: &str = "noise.param";
const FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    trained_scales: usize,
    separate_cond: bool,
    sigmas_a: Vec<f64>,
    sigmas_b: Vec<f64>,
    /// Per-scale fingerprints, checked on load.
    fingerprints: Vec<String>,
    /// Scale whose training diverged; its networks are stored but not loaded.
    partial_scale: Option<usize>,
    schedule: ScaleSchedule,
    config: TrainConfig,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn net_file(dir: &Path, net: &str, scale: usize) -> PathBuf {
    dir.join(format!("{net}_{scale}.param"))
}

fn write_params(path: &Path, params: &ParameterSet) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    params.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_params(path: &Path) -> Result<ParameterSet> {
    let f = fs::File::open(path).map_err(|e| bad(path, e.to_string()))?;
    ParameterSet::read_from(BufReader::new(f)).map_err(|e| bad(path, e.to_string()))
}

fn write_nets(nets: &ScaleNets, dir: &Path) -> Result<()> {
    for (name, net) in nets.named() {
        write_params(&net_file(dir, name, nets.scale), net.params())?;
    }
    Ok(())
}

fn manifest(bundle: &ModelBundle, partial_scale: Option<usize>) -> Manifest {
    let t = bundle.scale_nets.len();
    Manifest {
        format: FORMAT,
        trained_scales: t,
        separate_cond: !bundle.config.ablation.shared_cond_uncond,
        sigmas_a: bundle.plan.sigmas_a.iter().take(t).copied().collect(),
        sigmas_b: bundle.plan.sigmas_b.iter().take(t).copied().collect(),
        fingerprints: bundle.fingerprints(),
        partial_scale,
        schedule: bundle.sched.clone(),
        config: bundle.config,
    }
}

fn write_manifest(m: &Manifest, dir: &Path) -> Result<()> {
    let text = toml::to_string(m).map_err(|e| bad(dir, e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

/// Writes every trained scale, the noise plan and the manifest.
pub fn save(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for nets in &bundle.scale_nets {
        write_nets(nets, dir)?;
    }
    let mut noise = ParameterSet::new();
    for (name, z) in [("z_star_A", &bundle.plan.z_star_a), ("z_star_B", &bundle.plan.z_star_b)] {
        noise.insert(name, z.shape(), z.values().to_vec());
    }
    write_params(&dir.join(NOISE_FILE), &noise)?;
    write_manifest(&manifest(bundle, None), dir)
}

/// Stores the networks of a scale whose training was interrupted.
pub fn save_partial(nets: &ScaleNets, dir: &Path) -> Result<()> {
    write_nets(nets, dir)?;
    let path = dir.join(MANIFEST);
    let mut m: Manifest = toml::from_str(&fs::read_to_string(&path)?).map_err(|e| bad(&path, e.to_string()))?;
    m.partial_scale = Some(nets.scale);
    write_manifest(&m, dir)
}

pub fn load(dir: &Path) -> Result<ModelBundle> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| bad(&path, e.to_string()))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| bad(&path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(bad(&path, format!("format {} is not supported", m.format)));
    }
    m.schedule.validate().map_err(|e| bad(&path, e.to_string()))?;
    m.config.validate().map_err(|e| bad(&path, e.to_string()))?;
    let t = m.trained_scales;
    if t > m.schedule.num_scales() || m.sigmas_a.len() != t || m.sigmas_b.len() != t || m.fingerprints.len() != t {
        return Err(bad(&path, "scale counts in the manifest disagree"));
    }
    let width = m.config.base_channels;
    let load_net = |name: &str, scale: usize, spec: NetSpec| -> Result<Net> {
        let file = net_file(dir, name, scale);
        Net::from_params(spec, read_params(&file)?).map_err(|e| bad(&file, e.to_string()))
    };
    let g = NetSpec::generator(width);
    let d = NetSpec::discriminator(width);
    let mut scale_nets = Vec::with_capacity(t);
    for n in 0..t {
        let nets = ScaleNets {
            scale: n,
            g_a: load_net("G_A", n, g)?,
            g_b: load_net("G_B", n, g)?,
            d_a: load_net("D_A", n, d)?,
            d_b: load_net("D_B", n, d)?,
            g_a_cond: if m.separate_cond { Some(load_net("Gc_A", n, g)?) } else { None },
            g_b_cond: if m.separate_cond { Some(load_net("Gc_B", n, g)?) } else { None },
        };
        if nets.fingerprint() != m.fingerprints[n] {
            return Err(bad(dir, format!("parameters of scale {n} do not match the manifest fingerprint")));
        }
        scale_nets.push(nets);
    }
    let noise_path = dir.join(NOISE_FILE);
    let noise = read_params(&noise_path)?;
    let (z_a, z_b) = match (noise.get("z_star_A"), noise.get("z_star_B")) {
        (Some(a), Some(b)) => (a.detach(), b.detach()),
        _ => return Err(bad(&noise_path, "missing reconstruction noise")),
    };
    let (h0, w0) = m.schedule.size(0);
    if z_a.shape() != [3, h0, w0] || z_b.shape() != [3, h0, w0] {
        return Err(bad(&noise_path, "reconstruction noise does not match the coarsest scale"));
    }
    let mut plan = NoisePlan::new(z_a, z_b, m.config.seed);
    plan.sigmas_a = m.sigmas_a;
    plan.sigmas_b = m.sigmas_b;
    Ok(ModelBundle { scale_nets, plan, sched: m.schedule, config: m.config })
}

/// Creates (or empties) the loss log.
pub fn start_log(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(LOSS_LOG), format!("{}\n", LossReport::CSV_HEADER))?;
    Ok(())
}

pub fn append_log(dir: &Path, reports: &[LossReport]) -> Result<()> {
    let path = dir.join(LOSS_LOG);
    if !path.exists() {
        start_log(dir)?;
    }
    let mut f = BufWriter::new(fs::OpenOptions::new().append(true).open(&path)?);
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_log(dir: &Path) -> Result<Vec<LossReport>> {
    let path = dir.join(LOSS_LOG);
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LossReport::CSV_HEADER) {
        return Err(bad(&path, "unexpected loss log header"));
    }
    lines.filter(|l| !l.trim().is_empty()).map(LossReport::parse_csv_row).collect()
}

/// Drops log rows of scales at or above `scales` (used before resuming).
pub fn truncate_log(dir: &Path, scales: usize) -> Result<()> {
    let path = dir.join(LOSS_LOG);
    if !path.exists() {
        return start_log(dir);
    }
    let kept: Vec<LossReport> = read_log(dir)?.into_iter().filter(|r| r.scale < scales).collect();
    start_log(dir)?;
    append_log(dir, &kept)
}
