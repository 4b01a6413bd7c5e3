use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use xpert_core::adaptation::{save_adapted, SvdRank};
use xpert_core::checkpoint::read_manifest;
use xpert_core::consolidation::{
    compression_report, consolidate_model, load_knowledge, save_knowledge, ConsolidatedKnowledge, ConsolidationOptions,
    ProjectionId, TuckerMethod,
};
use xpert_core::init::{adapted_projection, emit_initialization, map_layers, save_dense_model, DenseConfig};
use xpert_core::moe::{load_activation_log, load_datasets, load_moe_model, run_profiling, save_activation_log, save_datasets, save_moe_model};
use xpert_core::probe::{build_synthetic_teacher, domain_datasets, generator_model, run_probe, transition_matrix, ProbeConfig};
use xpert_core::selection::{build_profile, SelectionReport};
use xpert_core::tucker::TuckerRanks;

use crate::error::CliError;

pub const DEFAULT_PROBE_CONFIG: &str = include_str!("../configs/probe-default.json");

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::input(path)(e.to_string()))
}

pub fn profile(model: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let m = load_moe_model(model).map_err(|e| CliError::input(model)(e.to_string()))?;
    let datasets = load_datasets(data).map_err(|e| CliError::input(data)(e.to_string()))?;
    let log = run_profiling(&m, &datasets)?;
    save_activation_log(&log, out).map_err(CliError::internal)?;
    log::info!("wrote {} activation records", log.len());
    Ok(())
}

fn parse_dims(dims: &str) -> Result<[usize; 4], CliError> {
    let parsed: Result<Vec<usize>, _> = dims.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match parsed.ok().and_then(|v| <[usize; 4]>::try_from(v).ok()) {
        Some(d) => Ok(d),
        None => Err(CliError::usage(format!("--dims expects N,M,L,K, got {dims:?}"))),
    }
}

pub fn select(log: &Path, n: usize, shared: &[usize], dims: &str, out: &Path) -> Result<(), CliError> {
    let [n_experts, n_domains, n_layers, top_k] = parse_dims(dims)?;
    let records = load_activation_log(log).map_err(|e| CliError::input(log)(e.to_string()))?;
    let profile = build_profile(&records, n_layers, n_experts, n_domains, top_k)?;
    let report = SelectionReport::build(&profile, n, shared)?;
    report.save(out).map_err(CliError::internal)?;
    Ok(())
}

pub fn consolidate(model: &Path, selection: &Path, ranks: TuckerRanks, hosvd: bool, out: &Path) -> Result<(), CliError> {
    let m = load_moe_model(model).map_err(|e| CliError::input(model)(e.to_string()))?;
    let report = SelectionReport::load(selection).map_err(|e| CliError::input(selection)(e.to_string()))?;
    let options = ConsolidationOptions {
        ranks,
        method: if hosvd { TuckerMethod::Hosvd } else { TuckerMethod::default() },
    };
    let ck = consolidate_model(&m, &report, &options)?;
    save_knowledge(&ck, out).map_err(CliError::internal)?;
    let stats = compression_report(&ck, &m.config)?;
    println!("{stats}");
    Ok(())
}

fn load_target(pack: &Path, target_config: &Path, seed: Option<u64>) -> Result<(ConsolidatedKnowledge<f32>, DenseConfig), CliError> {
    let ck = load_knowledge(pack).map_err(|e| CliError::input(pack)(e.to_string()))?;
    let mut cfg: DenseConfig =
        serde_json::from_str(&read_text(target_config)?).map_err(|e| CliError::input(target_config)(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok((ck, cfg))
}

pub fn adapt(pack: &Path, target_config: &Path, seed: Option<u64>, svd_rank: SvdRank, out: &Path) -> Result<(), CliError> {
    let (ck, cfg) = load_target(pack, target_config, seed)?;
    let mut adapted = BTreeMap::new();
    for (t, src) in map_layers(ck.n_layers(), cfg.n_layers)?.into_iter().enumerate() {
        for projection in ProjectionId::ALL {
            let a = adapted_projection(&ck, src, projection, &cfg, svd_rank)?;
            adapted.insert((t, projection), a.m_hat);
        }
    }
    save_adapted(&adapted, out).map_err(CliError::internal)?;
    Ok(())
}

pub fn init(pack: &Path, target_config: &Path, seed: Option<u64>, svd_rank: SvdRank, out: &Path) -> Result<(), CliError> {
    let (ck, cfg) = load_target(pack, target_config, seed)?;
    let model = emit_initialization(&ck, &cfg, svd_rank)?;
    save_dense_model(&model, out).map_err(CliError::internal)?;
    Ok(())
}

pub fn probe(config: Option<&Path>, out: &Path, dump_teacher: Option<&Path>) -> Result<(), CliError> {
    let cfg: ProbeConfig = match config {
        Some(path) => serde_json::from_str(&read_text(path)?).map_err(|e| CliError::input(path)(e.to_string()))?,
        None => serde_json::from_str(DEFAULT_PROBE_CONFIG).map_err(CliError::internal)?,
    };
    cfg.validate()?;
    if let Some(dir) = dump_teacher {
        dump(&cfg, dir)?;
    }
    let result = run_probe(&cfg)?;
    fs::write(out, result.to_json()).map_err(CliError::internal)?;
    eprintln!(
        "median final loss: xpert {:.4}, random {:.4}",
        result.median_final_xpert, result.median_final_random
    );
    Ok(())
}

fn dump(cfg: &ProbeConfig, dir: &Path) -> Result<(), CliError> {
    let seed = cfg.seeds[0];
    let spec = xpert_core::probe::SyntheticTeacherSpec { seed, ..cfg.teacher };
    let target = DenseConfig { seed, ..cfg.target };
    let teacher = build_synthetic_teacher(&spec)?;
    let transition = transition_matrix(&generator_model(&teacher, &target)?);
    let datasets = domain_datasets(&spec, &transition, &cfg.profile, seed)?;
    fs::create_dir_all(dir).map_err(CliError::internal)?;
    save_moe_model(&teacher.model.cast::<f32>(), dir.join("teacher.xtck")).map_err(CliError::internal)?;
    save_datasets(&datasets, dir.join("domains.xtck")).map_err(CliError::internal)?;
    let target_json = serde_json::to_string_pretty(&target).map_err(CliError::internal)?;
    fs::write(dir.join("target.json"), target_json).map_err(CliError::internal)?;
    Ok(())
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let manifest = read_manifest(path).map_err(|e| CliError::input(path)(e.to_string()))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(CliError::internal)?;
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::internal(e)),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_probe_config_is_the_library_default() {
        let cfg: ProbeConfig = serde_json::from_str(DEFAULT_PROBE_CONFIG).unwrap();
        assert_eq!(cfg, ProbeConfig::default());
    }

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("64,4,16,8").unwrap(), [64, 4, 16, 8]);
        assert!(parse_dims("64,4,16").is_err());
        assert!(parse_dims("a,b,c,d").is_err());
    }
}
