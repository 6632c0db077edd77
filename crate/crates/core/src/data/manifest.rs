//! On-disk layout of a generated dataset.
//!
//! ```text
//! <dir>/dataset.json        generation config
//! <dir>/train.jsonl         one record per training triplet
//! <dir>/validation.jsonl    one record per clean validation query
//! <dir>/gallery.jsonl       one record per gallery target
//! <dir>/images/*.ppm        8-bit binary PPM rasters
//! ```
//!
//! Image paths inside the manifests are relative to `<dir>`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    AttributeVector, DatasetConfig, GalleryItem, ModificationText, Query, Triplet, TripletDataset,
};
use crate::error::{IntentError, Result};
use crate::image::Image;

#[derive(Debug, Serialize, Deserialize)]
struct TripletRecord {
    id: usize,
    tokens: ModificationText,
    is_noisy: bool,
    ref_attrs: AttributeVector,
    target_attrs: AttributeVector,
    reference: String,
    target: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryRecord {
    id: usize,
    tokens: ModificationText,
    ref_attrs: AttributeVector,
    target_attrs: AttributeVector,
    reference: String,
    gallery_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct GalleryRecord {
    index: usize,
    attrs: AttributeVector,
    image: String,
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| IntentError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(&record).expect("manifest records serialize");
        writeln!(out, "{line}").map_err(|e| IntentError::io(path, e))?;
    }
    out.flush().map_err(|e| IntentError::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| IntentError::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, line)| !matches!(line, Ok(l) if l.trim().is_empty()))
        .map(|(n, line)| {
            let line = line.map_err(|e| IntentError::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| IntentError::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", n + 1),
            })
        })
        .collect()
}

pub fn write_dataset(dataset: &TripletDataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| IntentError::io(&images, e))?;
    let save = |name: String, img: &Image| -> Result<String> {
        img.write_pnm(&images.join(&name))?;
        Ok(format!("images/{name}"))
    };

    let config_path = dir.join("dataset.json");
    let config = serde_json::to_string_pretty(&dataset.config).expect("config serializes");
    fs::write(&config_path, config + "\n").map_err(|e| IntentError::io(&config_path, e))?;

    let train = dataset
        .triplets
        .iter()
        .map(|t| {
            Ok(TripletRecord {
                id: t.id,
                tokens: t.modification.clone(),
                is_noisy: t.is_noisy,
                ref_attrs: t.ref_attrs,
                target_attrs: t.target_attrs,
                reference: save(format!("train_{:05}_ref.ppm", t.id), &t.reference)?,
                target: save(format!("train_{:05}_tgt.ppm", t.id), &t.target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&dir.join("train.jsonl"), train.into_iter())?;

    let validation = dataset
        .validation
        .iter()
        .map(|q| {
            Ok(QueryRecord {
                id: q.id,
                tokens: q.modification.clone(),
                ref_attrs: q.ref_attrs,
                target_attrs: q.target_attrs,
                reference: save(format!("val_{:05}_ref.ppm", q.id), &q.reference)?,
                gallery_index: q.truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&dir.join("validation.jsonl"), validation.into_iter())?;

    let gallery = dataset
        .gallery
        .iter()
        .enumerate()
        .map(|(index, g)| {
            Ok(GalleryRecord {
                index,
                attrs: g.attrs,
                image: save(format!("gallery_{index:05}.ppm"), &g.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&dir.join("gallery.jsonl"), gallery.into_iter())
}

pub fn load_dataset(dir: &Path) -> Result<TripletDataset> {
    let config_path = dir.join("dataset.json");
    if !config_path.exists() {
        return Err(IntentError::Missing(format!(
            "no dataset at {} (expected dataset.json); run `intent generate` first",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&config_path).map_err(|e| IntentError::io(&config_path, e))?;
    let config: DatasetConfig = serde_json::from_str(&text).map_err(|e| IntentError::Format {
        path: config_path.clone(),
        msg: e.to_string(),
    })?;
    let image = |rel: &str| Image::read_pnm(&dir.join(PathBuf::from(rel)));

    let triplets = read_jsonl::<TripletRecord>(&dir.join("train.jsonl"))?
        .into_iter()
        .map(|r| {
            Ok(Triplet {
                id: r.id,
                reference: image(&r.reference)?,
                modification: r.tokens,
                target: image(&r.target)?,
                ref_attrs: r.ref_attrs,
                target_attrs: r.target_attrs,
                is_noisy: r.is_noisy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gallery = read_jsonl::<GalleryRecord>(&dir.join("gallery.jsonl"))?
        .into_iter()
        .map(|r| {
            Ok(GalleryItem {
                attrs: r.attrs,
                image: image(&r.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let validation = read_jsonl::<QueryRecord>(&dir.join("validation.jsonl"))?
        .into_iter()
        .map(|r| {
            if r.gallery_index >= gallery.len() {
                return Err(IntentError::Format {
                    path: dir.join("validation.jsonl"),
                    msg: format!("query {} points past the gallery", r.id),
                });
            }
            Ok(Query {
                id: r.id,
                reference: image(&r.reference)?,
                modification: r.tokens,
                ref_attrs: r.ref_attrs,
                target_attrs: r.target_attrs,
                truth: r.gallery_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TripletDataset {
        config,
        triplets,
        validation,
        gallery,
    })
}
