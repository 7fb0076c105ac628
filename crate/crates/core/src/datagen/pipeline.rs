//! File-based generation steps: scenes, masks and tampered images, plus
//! loading sample groups back from a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{info, warn};
use serde::Serialize;

use super::clients::{Inpainter, ObjectProposer, Segmenter};
use super::manifest::{
    relative_to, resolve, DatasetManifest, ManifestEntry, MaskRecordEntry, TamperedEntry,
};
use super::scene::procedural_scene;
use super::SampleGroup;
use crate::error::{Error, Result};
use crate::imageops::hash_bytes;
use crate::mask::Mask;
use crate::maskgen::{
    process_object_mask, random_mask_record, random_polygon_mask, AreaSampler, MaskDecision,
    MaskRecord,
};

/// Area targets used when no object mask was accepted anywhere.
pub const DEFAULT_AREA_TARGETS: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.4];

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    Ok(image::open(path)?.to_rgb8())
}

/// Writes `count` procedural scenes as PNG files into `dir`.
pub fn generate_scenes(
    dir: &Path,
    count: usize,
    height: u32,
    width: u32,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("scene_{i:05}.png"));
            let s = hash_bytes(&[b"scene", &seed.to_le_bytes(), &(i as u64).to_le_bytes()]);
            procedural_scene(height, width, s).save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().map(|e| e.to_string_lossy().to_lowercase());
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rejection {
    pub image_path: PathBuf,
    pub object: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct MaskGenOutput {
    pub manifest: DatasetManifest,
    pub rejections: Vec<Rejection>,
    pub written: Vec<PathBuf>,
}

fn save_record(
    record: &MaskRecord,
    masks_dir: &Path,
    base: &Path,
    prefix: &str,
    written: &mut Vec<PathBuf>,
) -> Result<MaskRecordEntry> {
    let n = record.mask_number;
    let orig = masks_dir.join(format!("{prefix}_m{n}.png"));
    record.original_mask.save(&orig)?;
    written.push(orig.clone());
    let edited = if record.edited_mask == record.original_mask {
        orig.clone()
    } else {
        let p = masks_dir.join(format!("{prefix}_m{n}_edit.png"));
        record.edited_mask.save(&p)?;
        written.push(p.clone());
        p
    };
    Ok(MaskRecordEntry {
        mask_number: n,
        original_mask_path: relative_to(base, &orig),
        edited_mask_path: relative_to(base, &edited),
        masked_object: record.masked_object.clone(),
        area_percentage: record.area_percentage,
        centroid: [record.centroid.0, record.centroid.1],
    })
}

/// Proposes and segments objects in every image, filters and coheres the
/// object masks, then adds one random polygon mask per image with its area
/// drawn from the accepted object-mask areas. Mask files go to
/// `out_dir/masks`; manifest paths are relative to `out_dir`.
pub fn generate_masks(
    images: &[PathBuf],
    out_dir: &Path,
    proposer: &dyn ObjectProposer,
    segmenter: &dyn Segmenter,
    seed: u64,
) -> Result<MaskGenOutput> {
    let masks_dir = out_dir.join("masks");
    create_dir(&masks_dir)?;
    let base = absolute(out_dir)?;
    let masks_dir = base.join("masks");
    let mut written = Vec::new();
    let mut rejections = Vec::new();
    let mut entries = Vec::new();
    let mut dims = Vec::new();
    let mut observed = Vec::new();

    for (idx, path) in images.iter().enumerate() {
        let path = absolute(path)?;
        let image = load_rgb(&path)?;
        let prefix = format!("{idx:05}_{}", stem(&path));
        let proposal = proposer.propose(&image)?;
        let mut records = Vec::new();
        for name in &proposal.names {
            let mask = match segmenter.segment(&image, name) {
                Ok(m) => m,
                Err(Error::NotFound(reason)) => {
                    rejections.push(Rejection {
                        image_path: path.clone(),
                        object: name.clone(),
                        reason,
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
            match process_object_mask(records.len(), name, mask)? {
                MaskDecision::Accepted(rec) => {
                    observed.push(rec.area_percentage);
                    records.push(save_record(&rec, &masks_dir, &base, &prefix, &mut written)?);
                }
                MaskDecision::Rejected { object, reason } => {
                    info!("{}: rejected {object}: {reason}", path.display());
                    rejections.push(Rejection {
                        image_path: path.clone(),
                        object,
                        reason,
                    });
                }
            }
        }
        dims.push((image.height() as usize, image.width() as usize, prefix));
        entries.push(ManifestEntry {
            image_path: relative_to(&base, &path),
            caption: proposal.caption,
            mask_records: records,
            tampered: Vec::new(),
            safety_flag: false,
        });
    }

    let areas = if observed.is_empty() {
        DEFAULT_AREA_TARGETS.to_vec()
    } else {
        observed
    };
    let mut sampler = AreaSampler::new(areas, hash_bytes(&[b"areas", &seed.to_le_bytes()]))?;
    for (idx, (entry, (h, w, prefix))) in entries.iter_mut().zip(dims).enumerate() {
        let target = sampler.sample();
        let poly_seed = hash_bytes(&[b"polygon", &seed.to_le_bytes(), &(idx as u64).to_le_bytes()]);
        let mask = (0..8u64)
            .find_map(|k| random_polygon_mask(h, w, target, poly_seed.wrapping_add(k)).ok());
        match mask {
            Some(mask) => {
                let rec = random_mask_record(entry.mask_records.len(), mask);
                entry.mask_records.push(save_record(
                    &rec,
                    &masks_dir,
                    &base,
                    &prefix,
                    &mut written,
                )?);
            }
            None => {
                warn!(
                    "{}: no random polygon reached area {target:.3}",
                    entry.image_path.display()
                );
                rejections.push(Rejection {
                    image_path: entry.image_path.clone(),
                    object: crate::maskgen::RANDOM_MASK_OBJECT.into(),
                    reason: format!("polygon area {target:.3} unreachable"),
                });
            }
        }
    }
    let manifest = DatasetManifest { entries };
    manifest.validate()?;
    Ok(MaskGenOutput {
        manifest,
        rejections,
        written,
    })
}

/// Probability that an entry is inpainted with its random mask rather than
/// its first object mask.
pub const P_RANDOM_TARGET: f64 = 0.5;

/// The mask record inpainted for the entry at `index`: the last random mask
/// with probability [`P_RANDOM_TARGET`], otherwise the first object mask.
/// Entries with only one kind of mask use that one.
pub fn inpaint_target(entry: &ManifestEntry, index: usize, seed: u64) -> Option<usize> {
    let is_random = |r: &&MaskRecordEntry| r.masked_object == crate::maskgen::RANDOM_MASK_OBJECT;
    let semantic = entry
        .mask_records
        .iter()
        .find(|r| !is_random(r))
        .map(|r| r.mask_number);
    let random = entry
        .mask_records
        .iter()
        .rev()
        .find(is_random)
        .map(|r| r.mask_number);
    match (semantic, random) {
        (Some(s), Some(r)) => {
            let draw = hash_bytes(&[
                b"target",
                &seed.to_le_bytes(),
                &(index as u64).to_le_bytes(),
            ]);
            let u = (draw >> 11) as f64 / (1u64 << 53) as f64;
            Some(if u < P_RANDOM_TARGET { r } else { s })
        }
        (s, r) => s.or(r),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenFailure {
    pub image_path: PathBuf,
    pub inpainter_id: String,
    pub mask_number: usize,
    pub error: String,
}

#[derive(Debug)]
pub struct GenDataOutput {
    pub manifest: DatasetManifest,
    pub failures: Vec<GenFailure>,
    pub written: Vec<PathBuf>,
    /// Tampered images that already existed and were reused.
    pub skipped: usize,
    /// Inpainting attempts, successful or not.
    pub attempts: usize,
}

/// Runs every inpainter on each entry's inpaint target. Outputs go to
/// `out_dir/tampered`; the returned manifest has all paths relative to
/// `out_dir`. Failures are recorded per entry and do not stop the run.
pub fn generate_tampered(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    inpainters: &[&dyn Inpainter],
    out_dir: &Path,
    skip_existing: bool,
    seed: u64,
) -> Result<GenDataOutput> {
    if inpainters.is_empty() {
        return Err(Error::invalid("at least one inpainter is required"));
    }
    let tampered_dir = out_dir.join("tampered");
    create_dir(&tampered_dir)?;
    let base = absolute(out_dir)?;
    let in_base = absolute(manifest_dir)?;
    let tampered_dir = base.join("tampered");
    let rebase = |p: &Path| relative_to(&base, &resolve(&in_base, p));

    let mut out = DatasetManifest::default();
    let mut failures = Vec::new();
    let mut written = Vec::new();
    let (mut skipped, mut attempts) = (0, 0);
    for (idx, entry) in manifest.entries.iter().enumerate() {
        let image_path = resolve(&in_base, &entry.image_path);
        let mut new_entry = ManifestEntry {
            image_path: rebase(&entry.image_path),
            caption: entry.caption.clone(),
            mask_records: entry
                .mask_records
                .iter()
                .map(|r| MaskRecordEntry {
                    original_mask_path: rebase(&r.original_mask_path),
                    edited_mask_path: rebase(&r.edited_mask_path),
                    ..r.clone()
                })
                .collect(),
            tampered: Vec::new(),
            safety_flag: entry.safety_flag,
        };
        let image = load_rgb(&image_path)?;
        if let Some(n) = inpaint_target(entry, idx, seed) {
            let rec = entry.record(n).expect("target comes from this entry");
            let mask = Mask::load(&resolve(&in_base, &rec.edited_mask_path))?;
            for inp in inpainters {
                attempts += 1;
                let path = tampered_dir.join(format!(
                    "{idx:05}_{}_m{n}_{}.png",
                    stem(&image_path),
                    inp.id()
                ));
                if skip_existing && path.exists() {
                    skipped += 1;
                } else {
                    match inp.inpaint(&image, &mask, &entry.caption) {
                        Ok(t) => {
                            t.save(&path)?;
                            written.push(path.clone());
                        }
                        Err(e) => {
                            warn!("{} with {}: {e}", image_path.display(), inp.id());
                            failures.push(GenFailure {
                                image_path: image_path.clone(),
                                inpainter_id: inp.id().to_string(),
                                mask_number: n,
                                error: e.to_string(),
                            });
                            continue;
                        }
                    }
                }
                new_entry.tampered.push(TamperedEntry {
                    inpainter_id: inp.id().to_string(),
                    path: relative_to(&base, &path),
                    mask_number: n,
                });
            }
        }
        out.entries.push(new_entry);
    }
    out.validate()?;
    Ok(GenDataOutput {
        manifest: out,
        failures,
        written,
        skipped,
        attempts,
    })
}

/// One sample group per (entry, mask record) that has tampered images, in
/// manifest order. The group mask is the edited mask.
pub fn load_groups(manifest: &DatasetManifest, base: &Path) -> Result<Vec<SampleGroup>> {
    let mut groups = Vec::new();
    for entry in &manifest.entries {
        let mut by_mask: BTreeMap<usize, Vec<&TamperedEntry>> = BTreeMap::new();
        for t in &entry.tampered {
            by_mask.entry(t.mask_number).or_default().push(t);
        }
        if by_mask.is_empty() {
            continue;
        }
        let original = load_rgb(&resolve(base, &entry.image_path))?;
        for (n, tampered) in by_mask {
            let rec = entry
                .record(n)
                .ok_or_else(|| Error::Validation(format!("absent mask_number {n}")))?;
            let group = SampleGroup {
                original_image: original.clone(),
                tampered_images: tampered
                    .iter()
                    .map(|t| load_rgb(&resolve(base, &t.path)))
                    .collect::<Result<_>>()?,
                mask: Mask::load(&resolve(base, &rec.edited_mask_path))?,
                caption: entry.caption.clone(),
                inpainter_ids: tampered.iter().map(|t| t.inpainter_id.clone()).collect(),
                random_mask: rec.masked_object == crate::maskgen::RANDOM_MASK_OBJECT,
            };
            group.validate()?;
            groups.push(group);
        }
    }
    Ok(groups)
}
