//! Artifact writers: run manifest, energy CSV, binary field snapshots.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use stofsi_core::driver::Trajectory;
use stofsi_core::mesh::{RefMesh, StructureMesh};

use crate::config::RunConfigFile;

/// Stable header of `energies.csv`; pinned by a golden test.
pub const ENERGY_CSV_HEADER: &str = "step,time,energy,theta,inf_j,norm_surrogate,energy_half,dissipation,c1,c2,div_norm,boundary_gap,struct_residual,fluid_residual,combined_residual,pressure_work,noise_work";

/// Magic prefix of the binary field snapshot format.
pub const FIELD_MAGIC: &[u8; 8] = b"STOFSI01";

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    master_seed: u64,
    paths: usize,
    workers: Option<usize>,
    outputs: Vec<String>,
    config: &'a RunConfigFile,
}

pub fn config_hash(cfg: &RunConfigFile) -> String {
    let mut h = Sha256::new();
    h.update(cfg.canonical_json().as_bytes());
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfigFile,
    master_seed: u64,
    paths: usize,
    workers: Option<usize>,
    outputs: &[String],
) -> std::io::Result<()> {
    let manifest = Manifest {
        tool: "stofsi",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: config_hash(cfg),
        master_seed,
        paths,
        workers,
        outputs: outputs.to_vec(),
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), text)
}

/// One row per time level (N + 1 rows); step quantities on row `n` describe
/// the step starting at `t^n` and are zero on the terminal row.
pub fn write_energy_csv(path: &Path, traj: &Trajectory) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{ENERGY_CSV_HEADER}")?;
    let step_or_zero = |v: &Vec<f64>, n: usize| if n < v.len() { v[n] } else { 0.0 };
    for n in 0..=traj.steps {
        let l = &traj.ledger;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            n,
            n as f64 * traj.dt,
            l.energy[n],
            traj.theta[n] as u8,
            traj.reports[n].inf_j,
            traj.reports[n].sobolev_s_norm,
            step_or_zero(&l.energy_half, n),
            step_or_zero(&l.dissipation, n),
            step_or_zero(&l.c1, n),
            step_or_zero(&l.c2, n),
            step_or_zero(&l.div_norm, n),
            step_or_zero(&l.boundary_gap, n),
            step_or_zero(&l.struct_residual, n),
            step_or_zero(&l.fluid_residual, n),
            step_or_zero(&l.combined_residual, n),
            step_or_zero(&l.pressure_work, n),
            step_or_zero(&l.noise_work, n),
        )?;
    }
    Ok(())
}

/// Little-endian snapshot: 8-byte magic, u32 rank, u64 dims, then row-major
/// f64 payload.
pub fn write_field_bin(path: &Path, dims: &[u64], data: &[f64]) -> std::io::Result<()> {
    let expected: u64 = dims.iter().product();
    assert_eq!(expected as usize, data.len(), "dims must cover the payload");
    let mut f = fs::File::create(path)?;
    f.write_all(FIELD_MAGIC)?;
    f.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        f.write_all(&d.to_le_bytes())?;
    }
    for &x in data {
        f.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_snapshots(
    dir: &Path,
    traj: &Trajectory,
    mesh: &RefMesh,
    smesh: &StructureMesh,
) -> std::io::Result<Vec<String>> {
    let fdir = dir.join("fields");
    fs::create_dir_all(&fdir)?;
    let nn = mesh.node_count() as u64;
    let m = smesh.dofs_per_component() as u64;
    let mut outputs = Vec::new();
    for (label, state) in [
        ("initial", &traj.states[0]),
        ("final", traj.states.last().unwrap()),
    ] {
        for (name, dims, data) in [
            ("u", vec![2, nn], &state.u.data),
            ("eta", vec![2, m], &state.eta.data),
            ("v", vec![2, m], &state.v.data),
        ] {
            let file = format!("fields/{name}_{label}.bin");
            write_field_bin(&dir.join(&file), &dims, data)?;
            outputs.push(file);
        }
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_binary_layout_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_field_bin(&path, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], FIELD_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 3);
        let first = f64::from_le_bytes(bytes[28..36].try_into().unwrap());
        assert_eq!(first, 1.0);
        assert_eq!(bytes.len(), 28 + 6 * 8);
    }
}
