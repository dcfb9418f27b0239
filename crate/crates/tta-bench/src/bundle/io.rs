//! Bundle directory reader/writer.
//!
//! The layout is bit-exact: saving a loaded bundle reproduces every blob
//! byte for byte. Loading re-validates norms (1e-3 tolerance) rather than
//! silently renormalizing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{
    sample_id, EmbeddingBundle, SampleFlag, SampleRecord, ScoringRule, FORMAT_VERSION,
    LOAD_NORM_TOL,
};
use crate::error::{Result, TtaError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEXT_BLOB: &str = "text_features.f32";
pub const SAMPLES_BLOB: &str = "samples.f32";
pub const LABELS_BLOB: &str = "labels.u32";
pub const FLAGS_BLOB: &str = "flags.u8";
pub const STREAM_BLOB: &str = "stream_order.u32";

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    format_version: u32,
    dataset_name: String,
    dim: usize,
    num_classes: usize,
    num_samples: usize,
    views_per_sample: usize,
    num_templates: usize,
    scoring: ScoringRule,
    class_names: Vec<String>,
    templates: Vec<String>,
    has_stream_order: bool,
}

/// Write a bundle directory. Creates `path` if needed.
pub fn save_bundle(bundle: &EmbeddingBundle, path: &Path) -> Result<()> {
    bundle.validate(LOAD_NORM_TOL)?;
    fs::create_dir_all(path).map_err(|e| TtaError::io(path, e))?;

    let manifest = BundleManifest {
        format_version: bundle.format_version,
        dataset_name: bundle.dataset_name.clone(),
        dim: bundle.dim,
        num_classes: bundle.num_classes(),
        num_samples: bundle.num_samples(),
        views_per_sample: bundle.views_per_sample,
        num_templates: bundle.num_templates(),
        scoring: bundle.scoring,
        class_names: bundle.class_names.clone(),
        templates: bundle.templates.clone(),
        has_stream_order: bundle.has_stream_order,
    };
    let manifest_path = path.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| TtaError::Manifest(e.to_string()))?;
    fs::write(&manifest_path, json.as_bytes()).map_err(|e| TtaError::io(&manifest_path, e))?;

    write_f32_blob(&path.join(TEXT_BLOB), &bundle.text_features)?;

    let mut sample_values = Vec::with_capacity(bundle.num_samples() * bundle.views_per_sample);
    let mut labels = Vec::with_capacity(bundle.num_samples());
    let mut flags = Vec::with_capacity(bundle.num_samples());
    let mut stream = Vec::with_capacity(bundle.num_samples());
    for s in &bundle.samples {
        sample_values.extend_from_slice(&s.views);
        labels.push(s.label);
        flags.push(s.flag.to_byte());
        stream.push(s.stream_position);
    }
    write_f32_blob(&path.join(SAMPLES_BLOB), &sample_values)?;
    write_u32_blob(&path.join(LABELS_BLOB), &labels)?;
    fs::write(path.join(FLAGS_BLOB), &flags)
        .map_err(|e| TtaError::io(path.join(FLAGS_BLOB), e))?;
    if bundle.has_stream_order {
        write_u32_blob(&path.join(STREAM_BLOB), &stream)?;
    }
    Ok(())
}

/// Read and validate a bundle directory.
pub fn load_bundle(path: &Path) -> Result<EmbeddingBundle> {
    let manifest_path = path.join(MANIFEST_FILE);
    let manifest_bytes =
        fs::read(&manifest_path).map_err(|e| TtaError::io(&manifest_path, e))?;
    let manifest: BundleManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| TtaError::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(TtaError::UnknownFormatVersion(manifest.format_version));
    }
    if manifest.class_names.len() != manifest.num_classes {
        return Err(TtaError::Manifest(format!(
            "manifest lists {} class names but num_classes = {}",
            manifest.class_names.len(),
            manifest.num_classes
        )));
    }
    if manifest.templates.len() != manifest.num_templates {
        return Err(TtaError::Manifest(format!(
            "manifest lists {} templates but num_templates = {}",
            manifest.templates.len(),
            manifest.num_templates
        )));
    }

    let (n, v, d) = (
        manifest.num_samples,
        manifest.views_per_sample,
        manifest.dim,
    );
    let text = read_f32_blob(
        &path.join(TEXT_BLOB),
        TEXT_BLOB,
        manifest.num_templates * manifest.num_classes * d,
    )?;
    let sample_values = read_f32_blob(&path.join(SAMPLES_BLOB), SAMPLES_BLOB, n * v * d)?;
    let labels = read_u32_blob(&path.join(LABELS_BLOB), LABELS_BLOB, n)?;
    let flag_path = path.join(FLAGS_BLOB);
    let flag_bytes = fs::read(&flag_path).map_err(|e| TtaError::io(&flag_path, e))?;
    if flag_bytes.len() != n {
        return Err(TtaError::BlobSize {
            name: FLAGS_BLOB.to_string(),
            expected: n as u64,
            found: flag_bytes.len() as u64,
        });
    }
    let stream = if manifest.has_stream_order {
        read_u32_blob(&path.join(STREAM_BLOB), STREAM_BLOB, n)?
    } else {
        (0..n as u32).collect()
    };

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        samples.push(SampleRecord {
            id: sample_id(i),
            label: labels[i],
            views: sample_values[i * v * d..(i + 1) * v * d].to_vec(),
            flag: SampleFlag::from_byte(flag_bytes[i])?,
            stream_position: stream[i],
        });
    }

    let bundle = EmbeddingBundle {
        format_version: manifest.format_version,
        dataset_name: manifest.dataset_name,
        dim: d,
        class_names: manifest.class_names,
        templates: manifest.templates,
        text_features: text,
        scoring: manifest.scoring,
        samples,
        views_per_sample: v,
        has_stream_order: manifest.has_stream_order,
    };
    bundle.validate(LOAD_NORM_TOL)?;
    Ok(bundle)
}

fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| TtaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = [0u8; 4];
    for &v in values {
        LittleEndian::write_f32(&mut buf, v);
        w.write_all(&buf).map_err(|e| TtaError::io(path, e))?;
    }
    w.flush().map_err(|e| TtaError::io(path, e))
}

fn write_u32_blob(path: &Path, values: &[u32]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| TtaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = [0u8; 4];
    for &v in values {
        LittleEndian::write_u32(&mut buf, v);
        w.write_all(&buf).map_err(|e| TtaError::io(path, e))?;
    }
    w.flush().map_err(|e| TtaError::io(path, e))
}

fn read_f32_blob(path: &Path, name: &str, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| TtaError::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(TtaError::BlobSize {
            name: name.to_string(),
            expected: (expected_len * 4) as u64,
            found: bytes.len() as u64,
        });
    }
    let mut out = vec![0f32; expected_len];
    LittleEndian::read_f32_into(&bytes, &mut out);
    Ok(out)
}

fn read_u32_blob(path: &Path, name: &str, expected_len: usize) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| TtaError::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(TtaError::BlobSize {
            name: name.to_string(),
            expected: (expected_len * 4) as u64,
            found: bytes.len() as u64,
        });
    }
    let mut out = vec![0u32; expected_len];
    LittleEndian::read_u32_into(&bytes, &mut out);
    Ok(out)
}
