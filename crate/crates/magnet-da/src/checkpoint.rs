//! `DMCK` model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DMCK" | version u32 = 1
//! config: input_channels u32 | input_size u32 | num_classes u32
//!       | num_blocks u32 | layers_per_block u32 | growth_rate u32
//!       | stem_channels u32 | transition_type u8 (0 = A, 1 = B)
//!       | transition_compression f64 | tap_fc_dim u32 | residual_hidden u32
//! per parameter (registration order):
//!       name_len u32 | name bytes | rank u32 | extents u32 x rank | f64 data
//! per batch-norm site (creation order): running_mean record, running_var
//!       record, in the same (name, rank, extents, data) format
//! ```
//!
//! Record counts are implied by the config, so the file carries no explicit
//! counts; round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bytesio::*;
use crate::error::{MagnetError, Result};
use crate::network::{MagnetModel, NetworkConfig, TransitionType};
use crate::tensor::Tensor;

pub const DMCK_MAGIC: &str = "DMCK";
pub const DMCK_VERSION: u32 = 1;

fn write_record<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, shape.len() as u32)?;
    for &e in shape {
        write_u32(w, e as u32)?;
    }
    for &v in data {
        write_f64(w, v)?;
    }
    Ok(())
}

struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn read_record<R: Read>(r: &mut R) -> Result<Record> {
    let name = read_string32(r, "record name")?;
    let rank = read_u32(r, "record rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "record extent")? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(read_f64(r, "record data")?);
    }
    Ok(Record { name, shape, data })
}

/// Batch-norm site name prefixes in state order, derived from the parameter
/// registry (every site registers its `gamma` first).
fn bn_site_prefixes(model: &MagnetModel) -> Vec<String> {
    model
        .params()
        .iter()
        .filter_map(|(_, p)| p.name.strip_suffix(".gamma").map(str::to_string))
        .collect()
}

pub fn save_model(model: &MagnetModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DMCK_MAGIC.as_bytes())?;
    write_u32(&mut w, DMCK_VERSION)?;

    let cfg = model.config();
    write_u32(&mut w, cfg.input_channels as u32)?;
    write_u32(&mut w, cfg.input_size as u32)?;
    write_u32(&mut w, cfg.num_classes as u32)?;
    write_u32(&mut w, cfg.num_blocks as u32)?;
    write_u32(&mut w, cfg.layers_per_block as u32)?;
    write_u32(&mut w, cfg.growth_rate as u32)?;
    write_u32(&mut w, cfg.stem_channels as u32)?;
    w.write_all(&[match cfg.transition_type {
        TransitionType::A => 0u8,
        TransitionType::B => 1u8,
    }])?;
    write_f64(&mut w, cfg.transition_compression)?;
    write_u32(&mut w, cfg.tap_fc_dim as u32)?;
    write_u32(&mut w, cfg.residual_hidden as u32)?;

    for (_, p) in model.params().iter() {
        write_record(&mut w, &p.name, p.value.shape(), p.value.data())?;
    }
    for (prefix, state) in bn_site_prefixes(model).iter().zip(model.bn_states()) {
        let c = state.running_mean.len();
        write_record(
            &mut w,
            &format!("{prefix}.running_mean"),
            &[c],
            &state.running_mean,
        )?;
        write_record(
            &mut w,
            &format!("{prefix}.running_var"),
            &[c],
            &state.running_var,
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MagnetModel> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, DMCK_MAGIC, &display)?;
    let version = read_u32(&mut r, "version")?;
    if version != DMCK_VERSION {
        return Err(MagnetError::Version {
            path: display,
            found: version,
            expected: DMCK_VERSION,
        });
    }

    let input_channels = read_u32(&mut r, "input_channels")? as usize;
    let input_size = read_u32(&mut r, "input_size")? as usize;
    let num_classes = read_u32(&mut r, "num_classes")? as usize;
    let num_blocks = read_u32(&mut r, "num_blocks")? as usize;
    let layers_per_block = read_u32(&mut r, "layers_per_block")? as usize;
    let growth_rate = read_u32(&mut r, "growth_rate")? as usize;
    let stem_channels = read_u32(&mut r, "stem_channels")? as usize;
    let transition_type = match read_u8(&mut r, "transition_type")? {
        0 => TransitionType::A,
        1 => TransitionType::B,
        other => {
            return Err(MagnetError::Truncated(format!(
                "unknown transition type tag {other}"
            )))
        }
    };
    let transition_compression = read_f64(&mut r, "transition_compression")?;
    let tap_fc_dim = read_u32(&mut r, "tap_fc_dim")? as usize;
    let residual_hidden = read_u32(&mut r, "residual_hidden")? as usize;

    let config = NetworkConfig {
        input_channels,
        input_size,
        num_classes,
        num_blocks,
        layers_per_block,
        growth_rate,
        stem_channels,
        transition_type,
        transition_compression,
        tap_fc_dim,
        residual_hidden,
    };
    let mut model = MagnetModel::new(config, 0)?;

    let n_params = model.params().len();
    for idx in 0..n_params {
        let rec = read_record(&mut r)?;
        let p = model
            .params()
            .iter()
            .nth(idx)
            .expect("index in range")
            .1;
        if p.name != rec.name || p.value.shape() != rec.shape.as_slice() {
            return Err(MagnetError::Truncated(format!(
                "parameter record {idx} is {:?} {:?}, expected {:?} {:?}",
                rec.name,
                rec.shape,
                p.name,
                p.value.shape()
            )));
        }
        let id = model.params().by_name(&rec.name).expect("name exists");
        model.params_mut().get_mut(id).value =
            Tensor::from_vec(rec.shape, rec.data)?;
    }

    let n_sites = model.bn_states().len();
    for idx in 0..n_sites {
        let mean = read_record(&mut r)?;
        let var = read_record(&mut r)?;
        if !mean.name.ends_with(".running_mean") || !var.name.ends_with(".running_var") {
            return Err(MagnetError::Truncated(format!(
                "batch-norm records {:?}/{:?} out of order",
                mean.name, var.name
            )));
        }
        let state = &mut model.bn_states_mut()[idx];
        if mean.data.len() != state.running_mean.len() {
            return Err(MagnetError::Truncated(format!(
                "batch-norm record {:?} has {} channels, expected {}",
                mean.name,
                mean.data.len(),
                state.running_mean.len()
            )));
        }
        state.running_mean = mean.data;
        state.running_var = var.data;
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(MagnetError::Truncated(
            "unexpected trailing bytes after checkpoint records".into(),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Mode, Tape};
    use crate::rng::SplitMix64;

    fn small_model(seed: u64) -> MagnetModel {
        let cfg = NetworkConfig {
            num_blocks: 2,
            layers_per_block: 1,
            growth_rate: 4,
            stem_channels: 6,
            tap_fc_dim: 8,
            transition_type: TransitionType::B,
            ..NetworkConfig::new(1, 16, 4)
        };
        MagnetModel::new(cfg, seed).unwrap()
    }

    fn random_batch(seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_vec(
            vec![3, 1, 16, 16],
            (0..3 * 256).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dmck");
        let mut model = small_model(3);
        // Perturb running stats away from the defaults first.
        let batch = random_batch(4);
        let mut tape = Tape::new();
        model.forward(&mut tape, &batch, Mode::Train).unwrap();

        save_model(&model, &path).unwrap();
        let reloaded = load_model(&path).unwrap();
        assert_eq!(model.config(), reloaded.config());
        for ((_, a), (_, b)) in model.params().iter().zip(reloaded.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
        assert_eq!(model.bn_states(), reloaded.bn_states());

        // Writing the reload reproduces the file byte for byte.
        let path2 = dir.path().join("model2.dmck");
        save_model(&reloaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn eval_after_reload_matches_in_memory_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dmck");
        let mut model = small_model(9);
        let batch = random_batch(10);
        let mut tape = Tape::new();
        model.forward(&mut tape, &batch, Mode::Train).unwrap();
        save_model(&model, &path).unwrap();
        let mut reloaded = load_model(&path).unwrap();

        let mut t1 = Tape::new();
        let o1 = model.forward(&mut t1, &batch, Mode::Eval).unwrap();
        let mut t2 = Tape::new();
        let o2 = reloaded.forward(&mut t2, &batch, Mode::Eval).unwrap();
        assert_eq!(
            t1.value(o1.ft_probs).data(),
            t2.value(o2.ft_probs).data()
        );
    }

    #[test]
    fn corrupted_magic_and_version_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dmck");
        let model = small_model(1);
        save_model(&model, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(MagnetError::BadMagic { .. })
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'D';
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(MagnetError::Version { .. })));
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dmck");
        let model = small_model(1);
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(MagnetError::Truncated(_))));
    }
}
