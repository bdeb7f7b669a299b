//! Checkpoint container: magic `GRNK`, a version word, then named matrix
//! records `[name_len u32 | name | rows u32 | cols u32 | f32 data]`, all
//! little-endian. Optimizer state trails the parameters with the same
//! record format under an `opt.` name prefix. The run configuration is
//! snapshotted next to the file as `<path>.cfg` in the config file format.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::config::{AppConfig, ConfigMap};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{Matrix, Scalar};
use crate::trainer::Adam;

const MAGIC: &[u8; 4] = b"GRNK";
const VERSION: u32 = 1;

fn cfg_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".cfg");
    PathBuf::from(p)
}

fn write_record<W: Write>(w: &mut W, name: &str, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    opt: Option<&Adam<S>>,
    app: &AppConfig,
    epochs_done: usize,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (_, p) in model.params.iter() {
        write_record(&mut w, &p.name, p.value.rows(), p.value.cols(), &p.value.to_f32_vec())?;
    }
    if let Some(opt) = opt {
        for (id, p) in model.params.iter() {
            let m = &opt.m[id.index()];
            let v = &opt.v[id.index()];
            write_record(&mut w, &format!("opt.m.{}", p.name), m.rows(), m.cols(), &m.to_f32_vec())?;
            write_record(&mut w, &format!("opt.v.{}", p.name), v.rows(), v.cols(), &v.to_f32_vec())?;
        }
        write_record(&mut w, "opt.t", 1, 1, &[opt.t as f32])?;
        write_record(&mut w, "opt.epochs_done", 1, 1, &[epochs_done as f32])?;
    }
    w.flush()?;
    app.to_map().save(&cfg_path(path))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config: AppConfig,
    pub records: Vec<CheckpointRecord>,
}

impl CheckpointData {
    pub fn find(&self, name: &str) -> Option<&CheckpointRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn epochs_done(&self) -> usize {
        self.find("opt.epochs_done")
            .map(|r| r.data[0] as usize)
            .unwrap_or(0)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }

    let mut records = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        r.read_exact(&mut word)?;
        let rows = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let cols = u32::from_le_bytes(word) as usize;
        let mut data = vec![0f32; rows * cols];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        records.push(CheckpointRecord {
            name,
            rows,
            cols,
            data,
        });
    }

    let config = AppConfig::from_map(&ConfigMap::load(&cfg_path(path))?)?;
    Ok(CheckpointData { config, records })
}

/// Rebuild a model (and optimizer, when the file carries state) from a
/// checkpoint. Every parameter must be present with matching shape, and no
/// unknown parameter records may remain.
pub fn load_model<S: Scalar>(data: &CheckpointData) -> Result<(Model<S>, Adam<S>, AppConfig)> {
    let mut model: Model<S> = Model::new(data.config.model.clone(), 0)?;
    let mut used = 0usize;
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.get(id).name.clone();
        let rec = data
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter record {name}")))?;
        let shape = model.params.value(id).shape();
        if (rec.rows, rec.cols) != shape {
            return Err(Error::Config(format!(
                "checkpoint record {name} is {}x{}, model expects {}x{}",
                rec.rows, rec.cols, shape.0, shape.1
            )));
        }
        model.params.get_mut(id).value = Matrix::from_f32_slice(rec.rows, rec.cols, &rec.data)?;
        used += 1;
    }
    let plain_records = data.records.iter().filter(|r| !r.name.starts_with("opt.")).count();
    if plain_records != used {
        return Err(Error::Checkpoint(format!(
            "{} parameter records in file, model consumed {}",
            plain_records, used
        )));
    }

    let mut opt = Adam::new(&model.params);
    if let Some(t) = data.find("opt.t") {
        opt.t = t.data[0] as u64;
        for (id, p) in model.params.iter() {
            for (prefix, slot) in [("opt.m.", 0), ("opt.v.", 1)] {
                let name = format!("{prefix}{}", p.name);
                let rec = data
                    .find(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer record {name}")))?;
                let m = Matrix::from_f32_slice(rec.rows, rec.cols, &rec.data)?;
                if slot == 0 {
                    opt.m[id.index()] = m;
                } else {
                    opt.v[id.index()] = m;
                }
            }
        }
    }
    Ok((model, opt, data.config.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AppConfig;
    use crate::data::synth_generate;
    use crate::generator::AttentionKind;
    use crate::model::UserFeatures;
    use crate::numeric::Session;
    use crate::trainer::{train_loop, TrainOptions};

    fn tiny_app(n_items: usize) -> AppConfig {
        let mut app = AppConfig::default();
        app.model.n_items = n_items;
        app.model.generator.d = 8;
        app.model.generator.d_top = 8;
        app.model.generator.mlp_hidden = 8;
        app.model.generator.l_short = 4;
        app.model.generator.layers = 1;
        app.model.ranker.long_len = 6;
        app.model.ranker.d_k = 8;
        app.trainer.batch_size = 3;
        app.trainer.epochs = 1;
        app
    }

    fn forward_bits(model: &Model<f32>, ds: &crate::data::Dataset) -> Vec<u32> {
        let feats = UserFeatures::from_record(&ds.users[0], &model.cfg);
        let mut sess = Session::new(&model.params);
        let run = crate::generator::generator_forward(
            &mut sess,
            model,
            &feats,
            None,
            crate::generator::ForwardMode::Inference,
            AttentionKind::Decomposed,
        )
        .unwrap();
        sess.value(run.h_ntp).data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn roundtrip_reproduces_forward_bitwise() {
        let ds = synth_generate(41, 40, 8, 2, 8).unwrap();
        let app = tiny_app(ds.n_items);
        let mut model: Model<f32> = Model::new(app.model.clone(), 41).unwrap();
        let mut opt = Adam::new(&model.params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.grnk");
        train_loop(&mut model, &ds, &app, &mut opt, &TrainOptions {
            checkpoint_path: Some(&path),
            ..TrainOptions::default()
        })
        .unwrap();

        let data = read_checkpoint(&path).unwrap();
        let (loaded, loaded_opt, _) = load_model::<f32>(&data).unwrap();
        assert_eq!(forward_bits(&model, &ds), forward_bits(&loaded, &ds));
        assert_eq!(loaded_opt.t, opt.t);
    }

    #[test]
    fn zero_epochs_checkpoint_equals_initialization() {
        let ds = synth_generate(42, 40, 8, 2, 8).unwrap();
        let mut app = tiny_app(ds.n_items);
        app.trainer.epochs = 0;
        let mut model: Model<f32> = Model::new(app.model.clone(), 42).unwrap();
        let init = model.params.clone();
        let mut opt = Adam::new(&model.params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.grnk");
        train_loop(&mut model, &ds, &app, &mut opt, &TrainOptions {
            checkpoint_path: Some(&path),
            ..TrainOptions::default()
        })
        .unwrap();
        let (loaded, _, _) = load_model::<f32>(&read_checkpoint(&path).unwrap()).unwrap();
        for (id, p) in loaded.params.iter() {
            assert_eq!(p.value, init.get(id).value, "{}", p.name);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = synth_generate(43, 60, 12, 2, 8).unwrap();
        let mut app = tiny_app(ds.n_items);
        app.trainer.epochs = 2;

        // uninterrupted
        let mut full: Model<f32> = Model::new(app.model.clone(), 43).unwrap();
        let mut full_opt = Adam::new(&full.params);
        train_loop(&mut full, &ds, &app, &mut full_opt, &TrainOptions::default()).unwrap();

        // one epoch, checkpoint, resume one more
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.grnk");
        let mut half_app = app.clone();
        half_app.trainer.epochs = 1;
        let mut half: Model<f32> = Model::new(app.model.clone(), 43).unwrap();
        let mut half_opt = Adam::new(&half.params);
        train_loop(&mut half, &ds, &half_app, &mut half_opt, &TrainOptions {
            checkpoint_path: Some(&path),
            ..TrainOptions::default()
        })
        .unwrap();

        let data = read_checkpoint(&path).unwrap();
        let (mut resumed, mut resumed_opt, _) = load_model::<f32>(&data).unwrap();
        train_loop(&mut resumed, &ds, &app, &mut resumed_opt, &TrainOptions {
            start_epoch: data.epochs_done(),
            ..TrainOptions::default()
        })
        .unwrap();

        for (id, p) in full.params.iter() {
            let bits_a: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = resumed.params.get(id).value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{} diverged after resume", p.name);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.grnk");
        std::fs::write(&path, b"NOPE____").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
