//! File formats: raw+header volumes, weight checkpoints, snapshot stores,
//! dataset manifests, CSV reports and portable-graymap renders.
//!
//! Volumes and fields share one container: a text header (dims, component
//! count, precision, byte order) terminated by a `data:` line, followed by
//! the contiguous little-endian payload, component-major.

use crate::error::{Error, Result};
use crate::harness::SyntheticPair;
use crate::network::{BackboneConfig, Param, WeightSet};
use crate::optimizer::{Snapshot, SnapshotStore, TrainRecord};
use crate::scalar::{Dtype, Scalar};
use crate::volume::{VectorField, Volume};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const VOLUME_MAGIC: &str = "VOLF 1";
const CKPT_MAGIC: &str = "VREG-CKPT 1";
const DATASET_MAGIC: &str = "VREG-DATASET 1";

fn parse_err(what: &str, detail: impl Into<String>) -> Error {
    Error::Parse {
        what: what.to_string(),
        detail: detail.into(),
    }
}

fn read_line_trimmed(r: &mut impl BufRead, what: &str) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    if n == 0 {
        return Err(parse_err(what, "unexpected end of file"));
    }
    Ok(line.trim_end().to_string())
}

fn expect_key<'a>(line: &'a str, key: &str, what: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .ok_or_else(|| parse_err(what, format!("expected `{}...`, got `{}`", key, line)))
        .map(str::trim)
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| parse_err(what, format!("bad integer `{}`", tok)))
        })
        .collect()
}

// ── volumes and fields ───────────────────────────────────────────────

fn write_raw<T: Scalar>(
    path: &Path,
    dims: &[usize],
    components: usize,
    data: &[T],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", VOLUME_MAGIC)?;
    writeln!(
        w,
        "dims: {}",
        dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
    )?;
    writeln!(w, "components: {}", components)?;
    writeln!(w, "precision: {}", T::DTYPE.name())?;
    writeln!(w, "byteorder: little")?;
    writeln!(w, "data:")?;
    let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.bytes());
    for &v in data {
        v.write_le(&mut bytes);
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn read_raw<T: Scalar>(path: &Path) -> Result<(Vec<usize>, usize, Vec<T>)> {
    let what = format!("volume file {}", path.display());
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_line_trimmed(&mut r, &what)?;
    if magic != VOLUME_MAGIC {
        return Err(parse_err(&what, format!("bad magic `{}`", magic)));
    }
    let dims_line = read_line_trimmed(&mut r, &what)?;
    let dims = parse_usize_list(expect_key(&dims_line, "dims:", &what)?, &what)?;
    let comp_line = read_line_trimmed(&mut r, &what)?;
    let components: usize = expect_key(&comp_line, "components:", &what)?
        .parse()
        .map_err(|_| parse_err(&what, "bad component count"))?;
    let prec_line = read_line_trimmed(&mut r, &what)?;
    let dtype = Dtype::parse(expect_key(&prec_line, "precision:", &what)?)
        .ok_or_else(|| parse_err(&what, "unknown precision"))?;
    let order_line = read_line_trimmed(&mut r, &what)?;
    if expect_key(&order_line, "byteorder:", &what)? != "little" {
        return Err(parse_err(&what, "only little-endian payloads are supported"));
    }
    let data_line = read_line_trimmed(&mut r, &what)?;
    if data_line != "data:" {
        return Err(parse_err(&what, format!("expected `data:`, got `{}`", data_line)));
    }
    let count: usize = dims.iter().product::<usize>() * components;
    let mut bytes = vec![0u8; count * dtype.bytes()];
    r.read_exact(&mut bytes).map_err(|e| {
        parse_err(
            &what,
            format!("payload shorter than header implies ({} values): {}", count, e),
        )
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(parse_err(&what, "payload longer than header implies"));
    }
    let data: Vec<T> = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::read_le(c)))
            .collect(),
    };
    Ok((dims, components, data))
}

pub fn write_volume<T: Scalar>(path: impl AsRef<Path>, volume: &Volume<T>) -> Result<()> {
    write_raw(path.as_ref(), volume.shape(), 1, volume.data())
}

pub fn read_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let (dims, components, data) = read_raw(path.as_ref())?;
    if components != 1 {
        return Err(parse_err(
            &format!("volume file {}", path.as_ref().display()),
            format!("expected 1 component, found {}", components),
        ));
    }
    Volume::new(dims, data)
}

pub fn write_field<T: Scalar>(path: impl AsRef<Path>, field: &VectorField<T>) -> Result<()> {
    write_raw(
        path.as_ref(),
        field.spatial_shape(),
        field.components(),
        field.data(),
    )
}

pub fn read_field<T: Scalar>(path: impl AsRef<Path>) -> Result<VectorField<T>> {
    let (dims, components, data) = read_raw(path.as_ref())?;
    VectorField::new(dims, components, data)
}

// ── weight checkpoints ───────────────────────────────────────────────

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    config: &BackboneConfig,
    weights: &WeightSet<T>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "{}", CKPT_MAGIC)?;
    writeln!(w, "dtype: {}", T::DTYPE.name())?;
    writeln!(w, "spatial_dims: {}", config.spatial_dims)?;
    writeln!(
        w,
        "encoder_channels: {}",
        config.encoder_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
    )?;
    writeln!(
        w,
        "decoder_channels: {}",
        config.decoder_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
    )?;
    writeln!(w, "leaky_slope: {}", config.leaky_slope)?;
    writeln!(w, "kernel_size: {}", config.kernel_size)?;
    writeln!(w, "tensors: {}", weights.params.len())?;
    for p in &weights.params {
        writeln!(
            w,
            "tensor {} {}",
            p.name,
            p.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
        )?;
        let mut bytes = Vec::with_capacity(p.data.len() * T::DTYPE.bytes());
        for &v in &p.data {
            v.write_le(&mut bytes);
        }
        w.write_all(&bytes)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(BackboneConfig, WeightSet<T>)> {
    let what = format!("checkpoint {}", path.as_ref().display());
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let magic = read_line_trimmed(&mut r, &what)?;
    if magic != CKPT_MAGIC {
        return Err(parse_err(&what, format!("bad magic `{}`", magic)));
    }
    let dtype_line = read_line_trimmed(&mut r, &what)?;
    let dtype = Dtype::parse(expect_key(&dtype_line, "dtype:", &what)?)
        .ok_or_else(|| parse_err(&what, "unknown dtype"))?;
    let sd_line = read_line_trimmed(&mut r, &what)?;
    let spatial_dims: usize = expect_key(&sd_line, "spatial_dims:", &what)?
        .parse()
        .map_err(|_| parse_err(&what, "bad spatial_dims"))?;
    let enc_line = read_line_trimmed(&mut r, &what)?;
    let encoder_channels = parse_usize_list(expect_key(&enc_line, "encoder_channels:", &what)?, &what)?;
    let dec_line = read_line_trimmed(&mut r, &what)?;
    let decoder_channels = parse_usize_list(expect_key(&dec_line, "decoder_channels:", &what)?, &what)?;
    let slope_line = read_line_trimmed(&mut r, &what)?;
    let leaky_slope: f64 = expect_key(&slope_line, "leaky_slope:", &what)?
        .parse()
        .map_err(|_| parse_err(&what, "bad leaky_slope"))?;
    let ks_line = read_line_trimmed(&mut r, &what)?;
    let kernel_size: usize = expect_key(&ks_line, "kernel_size:", &what)?
        .parse()
        .map_err(|_| parse_err(&what, "bad kernel_size"))?;
    let nt_line = read_line_trimmed(&mut r, &what)?;
    let n_tensors: usize = expect_key(&nt_line, "tensors:", &what)?
        .parse()
        .map_err(|_| parse_err(&what, "bad tensor count"))?;

    let mut params = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let header = read_line_trimmed(&mut r, &what)?;
        let rest = expect_key(&header, "tensor", &what)?;
        let mut toks = rest.split_whitespace();
        let name = toks
            .next()
            .ok_or_else(|| parse_err(&what, "tensor line missing name"))?
            .to_string();
        let shape: Vec<usize> = toks
            .map(|t| t.parse::<usize>().map_err(|_| parse_err(&what, "bad tensor shape")))
            .collect::<Result<_>>()?;
        let count: usize = shape.iter().product();
        let mut bytes = vec![0u8; count * dtype.bytes()];
        r.read_exact(&mut bytes)
            .map_err(|e| parse_err(&what, format!("tensor `{}` payload truncated: {}", name, e)))?;
        let data: Vec<T> = match dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::read_le(c)))
                .collect(),
        };
        // consume the newline that terminates the binary block
        let mut nl = [0u8; 1];
        r.read_exact(&mut nl)
            .map_err(|_| parse_err(&what, "missing terminator after tensor payload"))?;
        params.push(Param { name, shape, data });
    }
    let config = BackboneConfig {
        spatial_dims,
        encoder_channels,
        decoder_channels,
        leaky_slope,
        kernel_size,
    };
    let weights = WeightSet { params };
    weights.validate(&config)?;
    Ok((config, weights))
}

// ── snapshot stores ──────────────────────────────────────────────────

/// Write the snapshot store as a directory of checkpoints plus a
/// `manifest.csv` with one `iteration,val_loss,file` row per snapshot.
pub fn save_store<T: Scalar>(
    dir: impl AsRef<Path>,
    config: &BackboneConfig,
    store: &SnapshotStore<T>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("iteration,val_loss,file\n");
    for snap in &store.snapshots {
        let file = format!("snapshot_{:07}.ckpt", snap.iteration);
        save_checkpoint(dir.join(&file), config, &snap.weights)?;
        manifest.push_str(&format!("{},{},{}\n", snap.iteration, snap.val_loss, file));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

pub fn load_store<T: Scalar>(dir: impl AsRef<Path>) -> Result<(BackboneConfig, SnapshotStore<T>)> {
    let dir = dir.as_ref();
    let what = format!("snapshot manifest {}", dir.join("manifest.csv").display());
    let text = std::fs::read_to_string(dir.join("manifest.csv"))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(&what, "empty manifest"))?;
    if header != "iteration,val_loss,file" {
        return Err(parse_err(&what, format!("bad header `{}`", header)));
    }
    let mut config: Option<BackboneConfig> = None;
    let mut snapshots = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(&what, format!("bad row `{}`", line)));
        }
        let iteration: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(&what, "bad iteration"))?;
        let val_loss: f64 = fields[1]
            .parse()
            .map_err(|_| parse_err(&what, "bad val_loss"))?;
        let (cfg, weights) = load_checkpoint::<T>(dir.join(fields[2]))?;
        match &config {
            None => config = Some(cfg),
            Some(existing) => {
                if *existing != cfg {
                    return Err(parse_err(&what, "snapshots disagree on the architecture"));
                }
            }
        }
        snapshots.push(Snapshot {
            iteration,
            val_loss,
            weights,
        });
    }
    let config = config.ok_or_else(|| parse_err(&what, "manifest lists no snapshots"))?;
    Ok((config, SnapshotStore { snapshots }))
}

// ── loss curves ──────────────────────────────────────────────────────

pub fn write_curves(path: impl AsRef<Path>, curves: &[TrainRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "iteration,train_loss,val_loss,noise_std,step_size")?;
    for r in curves {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.iteration, r.train_loss, r.val_loss, r.noise_std, r.step_size
        )?;
    }
    Ok(())
}

// ── datasets ─────────────────────────────────────────────────────────

/// Persist pairs (volumes, masks, ground-truth field) under `dir` with a
/// line-based manifest listing every file.
pub fn save_dataset<T: Scalar>(dir: impl AsRef<Path>, pairs: &[SyntheticPair<T>]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let labels = pairs.first().map(|p| p.moving_masks.len()).unwrap_or(0);
    let mut manifest = format!("{}\npairs: {}\nlabels: {}\n", DATASET_MAGIC, pairs.len(), labels);
    for (i, pair) in pairs.iter().enumerate() {
        if pair.moving_masks.len() != labels {
            return Err(Error::InvalidConfig(
                "all pairs must carry the same label count".into(),
            ));
        }
        let mut files = Vec::new();
        let moving = format!("p{:04}_moving.volf", i);
        write_volume(dir.join(&moving), &pair.moving)?;
        files.push(moving);
        let fixed = format!("p{:04}_fixed.volf", i);
        write_volume(dir.join(&fixed), &pair.fixed)?;
        files.push(fixed);
        let truth = format!("p{:04}_truth.volf", i);
        write_field(dir.join(&truth), &pair.ground_truth)?;
        files.push(truth);
        for (li, (mm, fm)) in pair.moving_masks.iter().zip(&pair.fixed_masks).enumerate() {
            let mname = format!("p{:04}_mmask{}.volf", i, li);
            write_volume(dir.join(&mname), mm)?;
            files.push(mname);
            let fname = format!("p{:04}_fmask{}.volf", i, li);
            write_volume(dir.join(&fname), fm)?;
            files.push(fname);
        }
        manifest.push_str(&format!("pair {}: {}\n", i, files.join(" ")));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load a dataset written by [`save_dataset`]. `path` may be the manifest
/// file or its directory.
pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<SyntheticPair<T>>> {
    let path = path.as_ref();
    let (manifest_path, dir): (PathBuf, PathBuf) = if path.is_dir() {
        (path.join("manifest.txt"), path.to_path_buf())
    } else {
        (
            path.to_path_buf(),
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        )
    };
    let what = format!("dataset manifest {}", manifest_path.display());
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut lines = text.lines();
    let magic = lines.next().ok_or_else(|| parse_err(&what, "empty manifest"))?;
    if magic != DATASET_MAGIC {
        return Err(parse_err(&what, format!("bad magic `{}`", magic)));
    }
    let pairs_line = lines.next().ok_or_else(|| parse_err(&what, "missing pair count"))?;
    let n_pairs: usize = expect_key(pairs_line, "pairs:", &what)?
        .parse()
        .map_err(|_| parse_err(&what, "bad pair count"))?;
    let labels_line = lines.next().ok_or_else(|| parse_err(&what, "missing label count"))?;
    let n_labels: usize = expect_key(labels_line, "labels:", &what)?
        .parse()
        .map_err(|_| parse_err(&what, "bad label count"))?;

    let mut pairs = Vec::with_capacity(n_pairs);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rest = expect_key(line, "pair", &what)?;
        let (_, files_part) = rest
            .split_once(':')
            .ok_or_else(|| parse_err(&what, format!("bad pair line `{}`", line)))?;
        let files: Vec<&str> = files_part.split_whitespace().collect();
        if files.len() != 3 + 2 * n_labels {
            return Err(parse_err(
                &what,
                format!("expected {} files per pair, got {}", 3 + 2 * n_labels, files.len()),
            ));
        }
        let moving = read_volume(dir.join(files[0]))?;
        let fixed = read_volume(dir.join(files[1]))?;
        let ground_truth = read_field(dir.join(files[2]))?;
        let mut moving_masks = Vec::with_capacity(n_labels);
        let mut fixed_masks = Vec::with_capacity(n_labels);
        for li in 0..n_labels {
            moving_masks.push(read_volume(dir.join(files[3 + 2 * li]))?);
            fixed_masks.push(read_volume(dir.join(files[4 + 2 * li]))?);
        }
        pairs.push(SyntheticPair {
            moving,
            fixed,
            moving_masks,
            fixed_masks,
            ground_truth,
        });
    }
    if pairs.len() != n_pairs {
        return Err(parse_err(
            &what,
            format!("manifest promises {} pairs, lists {}", n_pairs, pairs.len()),
        ));
    }
    Ok(pairs)
}

// ── graymap renders ──────────────────────────────────────────────────

/// 8-bit binary PGM, min-max scaled; 2-D volumes only.
pub fn write_pgm<T: Scalar>(path: impl AsRef<Path>, volume: &Volume<T>) -> Result<()> {
    if volume.ndim() != 2 {
        return Err(Error::invalid(
            "write_pgm",
            format!("graymap rendering needs a 2-D volume, got {:?}", volume.shape()),
        ));
    }
    let (h, w) = (volume.shape()[0], volume.shape()[1]);
    let (lo, hi) = volume.min_max();
    let range = (hi - lo).as_f64().max(1e-30);
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    write!(out, "P5\n{} {}\n255\n", w, h)?;
    let bytes: Vec<u8> = volume
        .data()
        .iter()
        .map(|&v| (((v - lo).as_f64() / range) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{generate_pair, SyntheticSpec};
    use crate::network::init_weights;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().expect("create temp dir")
    }

    #[test]
    fn volume_round_trip_is_exact() {
        let dir = tmp();
        let v = Volume::new(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let p = dir.path().join("v.volf");
        write_volume(&p, &v).unwrap();
        let back: Volume<f64> = read_volume(&p).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn field_round_trip_is_exact() {
        let dir = tmp();
        let f = VectorField::new(vec![5], 1, vec![0.25, -1.5, 3.0, 0.0, 9.75]).unwrap();
        let p = dir.path().join("f.volf");
        write_field(&p, &f).unwrap();
        let back: VectorField<f64> = read_field(&p).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tmp();
        let v = Volume::new(vec![4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let p = dir.path().join("v.volf");
        write_volume(&p, &v).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_volume::<f64>(&p).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tmp();
        let cfg = BackboneConfig {
            spatial_dims: 2,
            encoder_channels: vec![4, 8, 8],
            decoder_channels: vec![8, 4],
            leaky_slope: 0.2,
            kernel_size: 3,
        };
        let w = init_weights::<f64>(&cfg, 21).unwrap();
        let p = dir.path().join("w.ckpt");
        save_checkpoint(&p, &cfg, &w).unwrap();
        let (cfg2, w2) = load_checkpoint::<f64>(&p).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(w, w2);
    }

    #[test]
    fn store_round_trip_preserves_order_and_losses() {
        let dir = tmp();
        let cfg = BackboneConfig {
            spatial_dims: 2,
            encoder_channels: vec![4, 8, 8],
            decoder_channels: vec![8, 4],
            leaky_slope: 0.2,
            kernel_size: 3,
        };
        let store = SnapshotStore {
            snapshots: (0..3)
                .map(|i| Snapshot {
                    iteration: 100 + i,
                    val_loss: -0.5 - i as f64 * 0.01,
                    weights: init_weights::<f64>(&cfg, i as u64).unwrap(),
                })
                .collect(),
        };
        save_store(dir.path(), &cfg, &store).unwrap();
        let (cfg2, store2) = load_store::<f64>(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(store.snapshots.len(), store2.snapshots.len());
        for (a, b) in store.snapshots.iter().zip(&store2.snapshots) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.val_loss, b.val_loss);
            assert_eq!(a.weights, b.weights);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tmp();
        let mut spec = SyntheticSpec::desk(3);
        spec.grid = vec![32, 32];
        spec.deform_max = 4.0;
        spec.max_initial_dice = None;
        let pairs: Vec<_> = (0..2)
            .map(|i| {
                let mut s = spec.clone();
                s.seed = 10 + i;
                generate_pair::<f64>(&s).unwrap()
            })
            .collect();
        save_dataset(dir.path(), &pairs).unwrap();
        let back = load_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].moving, pairs[0].moving);
        assert_eq!(back[1].ground_truth, pairs[1].ground_truth);
        assert_eq!(back[1].fixed_masks, pairs[1].fixed_masks);
    }

    #[test]
    fn pgm_has_correct_header_and_size() {
        let dir = tmp();
        let v = Volume::from_fn(vec![5, 7], |p| (p[0] + p[1]) as f64);
        let p = dir.path().join("v.pgm");
        write_pgm(&p, &v).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n7 5\n255\n"));
        assert_eq!(bytes.len(), b"P5\n7 5\n255\n".len() + 35);
    }
}
