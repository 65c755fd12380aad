//! Episodic data plumbing: class-fold splits, manifest files, episode
//! sampling, and the synthetic shape dataset generator.
//!
//! Mask files store one class-id map per image: 0 is background, class c
//! occupies pixels of value c+1. Binarizing against a target class gives the
//! {0,1} episode masks.

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::rng::PortableRng;
use crate::tensor::TensorData;
use std::fmt::Write as _;
use std::path::Path;

/// One few-shot task: k support image/mask pairs plus a query pair, all
/// binarized against `class_id`.
#[derive(Debug, Clone)]
pub struct Episode {
    pub supports: Vec<(TensorData<f32>, TensorData<f32>)>,
    pub query_image: TensorData<f32>,
    pub query_mask: TensorData<f32>,
    pub class_id: usize,
}

/// Disjoint train/test class sets for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    pub fold_index: usize,
}

/// Contiguous-block fold assignment; fold sizes differ by at most one.
pub fn split_folds(num_classes: usize, num_folds: usize, fold_index: usize) -> Result<DatasetSplit> {
    if num_folds == 0 || num_folds > num_classes || fold_index >= num_folds {
        return Err(Error::config(format!(
            "invalid fold {fold_index} for {num_classes} classes in {num_folds} folds"
        )));
    }
    let base = num_classes / num_folds;
    let rem = num_classes % num_folds;
    let size = |f: usize| base + usize::from(f < rem);
    let start: usize = (0..fold_index).map(size).sum();
    let test: Vec<usize> = (start..start + size(fold_index)).collect();
    let train: Vec<usize> = (0..num_classes).filter(|c| !test.contains(c)).collect();
    debug_assert!(train.iter().all(|c| !test.contains(c)));
    Ok(DatasetSplit {
        train_classes: train,
        test_classes: test,
        fold_index,
    })
}

/// One manifest line: image file, mask file, classes present in the mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_path: String,
    pub mask_path: String,
    pub class_ids: Vec<usize>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (img, msk, ids) = match (parts.next(), parts.next(), parts.next()) {
            (Some(i), Some(m), Some(c)) => (i, m, c),
            _ => {
                return Err(Error::dataset(format!(
                    "manifest line {}: expected image<TAB>mask<TAB>classes",
                    lineno + 1
                )))
            }
        };
        let class_ids = ids
            .split(',')
            .map(|s| {
                s.trim().parse::<usize>().map_err(|_| {
                    Error::dataset(format!("manifest line {}: bad class id {s:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ManifestRecord {
            image_path: img.to_string(),
            mask_path: msk.to_string(),
            class_ids,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        let ids: Vec<String> = r.class_ids.iter().map(|c| c.to_string()).collect();
        writeln!(text, "{}\t{}\t{}", r.image_path, r.mask_path, ids.join(",")).unwrap();
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// {0,1} mask of the pixels a class occupies in a class-id map.
pub fn binarize_mask(mask: &TensorData<f32>, class_id: usize) -> TensorData<f32> {
    let want = (class_id + 1) as f32;
    let data = mask.data().iter().map(|&v| f32::from(v == want)).collect();
    TensorData::new(mask.shape().to_vec(), data).unwrap()
}

/// Pure index-level episode draw: picks a class uniformly from the pool
/// (dropping classes with fewer than k+1 images), then k+1 distinct image
/// indices into that class's image list. Split out from file loading so the
/// sampling distribution is testable without I/O.
pub fn sample_episode_indices(
    class_pool: &[usize],
    images_per_class: &dyn Fn(usize) -> usize,
    k: usize,
    rng: &mut PortableRng,
) -> Result<(usize, Vec<usize>)> {
    let mut candidates: Vec<usize> = class_pool.to_vec();
    while !candidates.is_empty() {
        let pick = rng.below(candidates.len());
        let class = candidates[pick];
        let n = images_per_class(class);
        if n >= k + 1 {
            return Ok((class, rng.sample_distinct(n, k + 1)));
        }
        candidates.swap_remove(pick);
    }
    Err(Error::dataset(format!(
        "no class in the pool has {} images for a {k}-shot episode",
        k + 1
    )))
}

/// Draws one k-shot episode from manifest records; paths resolve relative
/// to `base`. The last drawn image is the query.
pub fn sample_episode(
    records: &[ManifestRecord],
    base: &Path,
    class_pool: &[usize],
    k: usize,
    rng: &mut PortableRng,
) -> Result<Episode> {
    // records grouped by class, in manifest order
    let per_class = |c: usize| -> Vec<usize> {
        records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.class_ids.contains(&c))
            .map(|(i, _)| i)
            .collect()
    };
    let (class, picks) =
        sample_episode_indices(class_pool, &|c| per_class(c).len(), k, rng)?;
    let pool = per_class(class);
    let mut pairs = Vec::with_capacity(k + 1);
    for &p in &picks {
        let rec = &records[pool[p]];
        let img = read_tensor(&base.join(&rec.image_path))?;
        let msk = read_tensor(&base.join(&rec.mask_path))?;
        pairs.push((img, binarize_mask(&msk, class)));
    }
    let (query_image, query_mask) = pairs.pop().unwrap();
    Ok(Episode {
        supports: pairs,
        query_image,
        query_mask,
        class_id: class,
    })
}

// ---- synthetic dataset ----

/// Shape vocabulary of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Stripe,
}

impl ShapeKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "disk" => ShapeKind::Disk,
            "square" => ShapeKind::Square,
            "triangle" => ShapeKind::Triangle,
            "ring" => ShapeKind::Ring,
            "cross" => ShapeKind::Cross,
            "stripe" => ShapeKind::Stripe,
            other => return Err(Error::config(format!("unknown shape class {other:?}"))),
        })
    }

    fn covers(self, di: f64, dj: f64, r: f64) -> bool {
        let d2 = di * di + dj * dj;
        match self {
            ShapeKind::Disk => d2 <= r * r,
            ShapeKind::Square => di.abs() <= r && dj.abs() <= r,
            ShapeKind::Triangle => {
                di >= -r && di <= r && dj.abs() <= (di + r) / 2.0
            }
            ShapeKind::Ring => d2 <= r * r && d2 >= (r / 2.0) * (r / 2.0),
            ShapeKind::Cross => {
                (di.abs() <= r / 3.0 && dj.abs() <= r)
                    || (dj.abs() <= r / 3.0 && di.abs() <= r)
            }
            ShapeKind::Stripe => di.abs() <= r && dj.abs() <= r && (di - dj).abs() <= r / 2.0,
        }
    }

    /// Distinct base color per shape class; episodes key on matching the
    /// supports' appearance, so classes must be separable.
    fn base_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Disk => [0.9, 0.2, 0.2],
            ShapeKind::Square => [0.2, 0.9, 0.2],
            ShapeKind::Triangle => [0.2, 0.3, 0.9],
            ShapeKind::Ring => [0.9, 0.9, 0.2],
            ShapeKind::Cross => [0.9, 0.2, 0.9],
            ShapeKind::Stripe => [0.2, 0.9, 0.9],
        }
    }
}

/// Generator settings, parsable from `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<ShapeKind>,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Std-dev of additive pixel noise.
    pub noise: f64,
    /// Maximum distractor shapes per image.
    pub distractors: usize,
    /// Class indices distractors may be drawn from; empty means any class.
    /// Restricting the pool to the training split keeps held-out classes
    /// from ever appearing as negatives, which would otherwise teach the
    /// model to suppress exactly the class it is evaluated on.
    pub distractor_pool: Vec<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: vec![
                ShapeKind::Disk,
                ShapeKind::Square,
                ShapeKind::Triangle,
                ShapeKind::Ring,
            ],
            images_per_class: 50,
            image_size: 64,
            noise: 0.05,
            distractors: 2,
            distractor_pool: Vec::new(),
        }
    }
}

impl SynthSpec {
    pub fn from_str_kv(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "classes" => {
                    spec.classes = value
                        .split(',')
                        .map(|s| ShapeKind::parse(s.trim()))
                        .collect::<Result<_>>()?
                }
                "images_per_class" => {
                    spec.images_per_class = value
                        .parse()
                        .map_err(|_| Error::config(format!("bad images_per_class {value:?}")))?
                }
                "image_size" => {
                    spec.image_size = value
                        .parse()
                        .map_err(|_| Error::config(format!("bad image_size {value:?}")))?
                }
                "noise" => {
                    spec.noise = value
                        .parse()
                        .map_err(|_| Error::config(format!("bad noise {value:?}")))?
                }
                "distractors" => {
                    spec.distractors = value
                        .parse()
                        .map_err(|_| Error::config(format!("bad distractors {value:?}")))?
                }
                "distractor_pool" => {
                    spec.distractor_pool = value
                        .split(',')
                        .map(|s| {
                            s.trim().parse().map_err(|_| {
                                Error::config(format!("bad distractor_pool entry {s:?}"))
                            })
                        })
                        .collect::<Result<_>>()?
                }
                other => return Err(Error::config(format!("unknown key {other:?}"))),
            }
        }
        if spec.classes.is_empty() || spec.images_per_class == 0 || spec.image_size < 8 {
            return Err(Error::config("degenerate synthetic spec".to_string()));
        }
        if let Some(&bad) = spec.distractor_pool.iter().find(|&&c| c >= spec.classes.len()) {
            return Err(Error::config(format!(
                "distractor_pool entry {bad} out of range for {} classes",
                spec.classes.len()
            )));
        }
        Ok(spec)
    }
}

struct Placed {
    kind: ShapeKind,
    class: usize,
    cy: f64,
    cx: f64,
    r: f64,
    color: [f64; 3],
}

fn place_shape(
    spec: &SynthSpec,
    class: usize,
    rng: &mut PortableRng,
) -> Placed {
    let s = spec.image_size as f64;
    let r = rng.uniform_in(s / 8.0, s / 4.0);
    let cy = rng.uniform_in(r, s - r);
    let cx = rng.uniform_in(r, s - r);
    let kind = spec.classes[class];
    let base = kind.base_color();
    // independent per-channel jitter: instances of one class cover a patch
    // of color space rather than a single hue, so a matcher trained on some
    // classes has seen feature directions near an unseen class's hue
    let color = [
        (base[0] + rng.uniform_in(-0.2, 0.2)).clamp(0.0, 1.0),
        (base[1] + rng.uniform_in(-0.2, 0.2)).clamp(0.0, 1.0),
        (base[2] + rng.uniform_in(-0.2, 0.2)).clamp(0.0, 1.0),
    ];
    Placed {
        kind,
        class,
        cy,
        cx,
        r,
        color,
    }
}

/// Renders one image with a target instance of `class` drawn on top of a few
/// distractor shapes, plus the class-id mask of every visible shape pixel.
pub fn render_image(
    spec: &SynthSpec,
    class: usize,
    rng: &mut PortableRng,
) -> (TensorData<f32>, TensorData<f32>) {
    let n = spec.image_size;
    let mut shapes = Vec::new();
    let pool: Vec<usize> = if spec.distractor_pool.is_empty() {
        (0..spec.classes.len()).collect()
    } else {
        spec.distractor_pool.clone()
    };
    let candidates: Vec<usize> = pool.into_iter().filter(|&c| c != class).collect();
    if !candidates.is_empty() && spec.distractors > 0 {
        for _ in 0..rng.below(spec.distractors + 1) {
            let other = candidates[rng.below(candidates.len())];
            shapes.push(place_shape(spec, other, rng));
        }
    }
    // target drawn last so it is never occluded
    shapes.push(place_shape(spec, class, rng));

    let mut img = vec![0.0f32; 3 * n * n];
    let mut msk = vec![0.0f32; n * n];
    let bg = rng.uniform_in(0.0, 0.25);
    for i in 0..n {
        for j in 0..n {
            let mut color = [bg, bg, bg];
            let mut id = 0.0f32;
            for p in &shapes {
                if p.kind.covers(i as f64 - p.cy, j as f64 - p.cx, p.r) {
                    color = p.color;
                    id = (p.class + 1) as f32;
                }
            }
            for (ch, &v) in color.iter().enumerate() {
                let noisy = v + spec.noise * rng.normal();
                img[ch * n * n + i * n + j] = noisy.clamp(0.0, 1.0) as f32;
            }
            msk[i * n + j] = id;
        }
    }
    (
        TensorData::new(vec![3, n, n], img).unwrap(),
        TensorData::new(vec![1, n, n], msk).unwrap(),
    )
}

/// Writes `images_per_class` rendered images per class plus a manifest into
/// `out_dir`; returns the records.
pub fn gen_synthetic_dataset(
    spec: &SynthSpec,
    out_dir: &Path,
    rng: &mut PortableRng,
) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut records = Vec::new();
    for class in 0..spec.classes.len() {
        for idx in 0..spec.images_per_class {
            let (img, msk) = render_image(spec, class, rng);
            let image_path = format!("img_{class:02}_{idx:04}.ptns");
            let mask_path = format!("msk_{class:02}_{idx:04}.ptns");
            write_tensor(&out_dir.join(&image_path), &img)?;
            write_tensor(&out_dir.join(&mask_path), &msk)?;
            let mut class_ids: Vec<usize> = msk
                .data()
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v as usize - 1)
                .collect();
            class_ids.sort_unstable();
            class_ids.dedup();
            records.push(ManifestRecord {
                image_path,
                mask_path,
                class_ids,
            });
        }
    }
    write_manifest(&out_dir.join("manifest.tsv"), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("protoseg-data-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn twenty_classes_four_folds_fold_zero() {
        let s = split_folds(20, 4, 0).unwrap();
        assert_eq!(s.test_classes, (0..5).collect::<Vec<_>>());
        assert_eq!(s.train_classes, (5..20).collect::<Vec<_>>());
    }

    #[test]
    fn eighty_classes_split_into_twenty_each() {
        for f in 0..4 {
            let s = split_folds(80, 4, f).unwrap();
            assert_eq!(s.test_classes.len(), 20);
            assert_eq!(s.train_classes.len(), 60);
        }
    }

    #[test]
    fn singleton_fold() {
        let s = split_folds(4, 4, 2).unwrap();
        assert_eq!(s.test_classes, vec![2]);
    }

    #[test]
    fn folds_partition_classes_with_balanced_sizes() {
        for n in [7usize, 10, 21] {
            let mut seen = vec![false; n];
            let mut sizes = Vec::new();
            for f in 0..4 {
                let s = split_folds(n, 4, f).unwrap();
                for &c in &s.test_classes {
                    assert!(!seen[c], "class {c} in two folds");
                    seen[c] = true;
                    assert!(!s.train_classes.contains(&c));
                }
                sizes.push(s.test_classes.len());
            }
            assert!(seen.iter().all(|&b| b));
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn out_of_range_fold_is_error() {
        assert!(split_folds(20, 4, 4).is_err());
        assert!(split_folds(3, 4, 0).is_err());
    }

    #[test]
    fn manifest_round_trips_with_comments_skipped() {
        let dir = tmpdir("man");
        let recs = vec![
            ManifestRecord {
                image_path: "a.ptns".into(),
                mask_path: "am.ptns".into(),
                class_ids: vec![0, 2],
            },
            ManifestRecord {
                image_path: "b.ptns".into(),
                mask_path: "bm.ptns".into(),
                class_ids: vec![1],
            },
        ];
        let p = dir.join("manifest.tsv");
        write_manifest(&p, &recs).unwrap();
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.insert_str(0, "# header comment\n\n");
        std::fs::write(&p, text).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), recs);
    }

    #[test]
    fn malformed_manifest_line_is_dataset_error() {
        let dir = tmpdir("badman");
        let p = dir.join("manifest.tsv");
        std::fs::write(&p, "only_two\tfields\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Dataset(_))));
    }

    #[test]
    fn one_shot_draw_uses_two_distinct_images() {
        let mut rng = PortableRng::new(1);
        let (class, picks) =
            sample_episode_indices(&[0, 1, 2], &|_| 10, 1, &mut rng).unwrap();
        assert!(class < 3);
        assert_eq!(picks.len(), 2);
        assert_ne!(picks[0], picks[1]);
    }

    #[test]
    fn seeded_draws_are_reproducible() {
        let draw = || {
            let mut rng = PortableRng::new(42);
            (0..20)
                .map(|_| sample_episode_indices(&[0, 1, 2], &|_| 8, 2, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn class_draw_is_uniform_over_the_pool() {
        let mut rng = PortableRng::new(7);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let (c, _) = sample_episode_indices(&[0, 1, 2], &|_| 5, 1, &mut rng).unwrap();
            counts[c] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            // within 5% relative of the uniform 1/3
            assert!((freq - 1.0 / 3.0).abs() < 0.05 / 3.0, "freq {freq}");
        }
    }

    #[test]
    fn thin_classes_are_skipped_then_exhaustion_errors() {
        let mut rng = PortableRng::new(3);
        // class 1 has too few images; draws must always land on 0 or 2
        for _ in 0..50 {
            let (c, _) =
                sample_episode_indices(&[0, 1, 2], &|c| if c == 1 { 1 } else { 6 }, 4, &mut rng)
                    .unwrap();
            assert_ne!(c, 1);
        }
        assert!(sample_episode_indices(&[0, 1], &|_| 2, 4, &mut rng).is_err());
    }

    #[test]
    fn spec_parser_handles_defaults_and_rejects_unknowns() {
        let spec = SynthSpec::from_str_kv("").unwrap();
        assert_eq!(spec, SynthSpec::default());
        let spec =
            SynthSpec::from_str_kv("classes = disk,stripe\nimages_per_class = 3\nnoise = 0\n")
                .unwrap();
        assert_eq!(spec.classes, vec![ShapeKind::Disk, ShapeKind::Stripe]);
        assert_eq!(spec.images_per_class, 3);
        assert!(SynthSpec::from_str_kv("shapes = disk\n").is_err());
        assert!(SynthSpec::from_str_kv("classes = blob\n").is_err());
    }

    #[test]
    fn four_classes_fifty_images_gives_two_hundred_records() {
        let dir = tmpdir("gen");
        let mut spec = SynthSpec::default();
        spec.image_size = 16;
        spec.images_per_class = 50;
        let mut rng = PortableRng::new(11);
        let recs = gen_synthetic_dataset(&spec, &dir, &mut rng).unwrap();
        assert_eq!(recs.len(), 200);
        // manifest written alongside and re-readable
        assert_eq!(read_manifest(&dir.join("manifest.tsv")).unwrap(), recs);
        // every referenced file parses
        for r in &recs[..10] {
            assert_eq!(read_tensor(&dir.join(&r.image_path)).unwrap().shape(), &[3, 16, 16]);
            assert_eq!(read_tensor(&dir.join(&r.mask_path)).unwrap().shape(), &[1, 16, 16]);
        }
    }

    #[test]
    fn noiseless_single_class_mask_matches_rendered_shape() {
        let mut spec = SynthSpec::default();
        spec.classes = vec![ShapeKind::Square];
        spec.noise = 0.0;
        spec.image_size = 32;
        let mut rng = PortableRng::new(13);
        let (img, msk) = render_image(&spec, 0, &mut rng);
        // foreground pixels carry the square's color, background is darker
        let n = 32 * 32;
        let mut fg = 0;
        for i in 0..n {
            if msk.data()[i] == 1.0 {
                fg += 1;
                assert!(img.data()[n + i] >= 0.5, "green channel of the square color");
            } else {
                assert_eq!(msk.data()[i], 0.0);
                assert!(img.data()[n + i] < 0.5);
            }
        }
        assert!(fg > 0);
    }

    #[test]
    fn foreground_area_fraction_is_in_bounds() {
        let mut spec = SynthSpec::default();
        spec.image_size = 32;
        spec.distractors = 0;
        let mut rng = PortableRng::new(17);
        let mut total = 0.0;
        let samples = 1000;
        for i in 0..samples {
            let class = i % spec.classes.len();
            let (_, msk) = render_image(&spec, class, &mut rng);
            let want = (class + 1) as f32;
            let fg = msk.data().iter().filter(|&&v| v == want).count();
            total += fg as f64 / (32.0 * 32.0);
        }
        let mean = total / samples as f64;
        // radii span [size/8, size/4]; all shapes fit within those bounds
        assert!((0.01..=0.35).contains(&mean), "mean fraction {mean}");
    }

    #[test]
    fn sampled_episode_satisfies_invariants() {
        let dir = tmpdir("ep");
        let mut spec = SynthSpec::default();
        spec.image_size = 16;
        spec.images_per_class = 6;
        let mut rng = PortableRng::new(19);
        let recs = gen_synthetic_dataset(&spec, &dir, &mut rng).unwrap();
        let ep = sample_episode(&recs, &dir, &[0, 1, 2, 3], 5, &mut rng).unwrap();
        assert_eq!(ep.supports.len(), 5);
        for (img, msk) in ep.supports.iter().chain(std::iter::once(&(
            ep.query_image.clone(),
            ep.query_mask.clone(),
        ))) {
            assert_eq!(img.shape(), &[3, 16, 16]);
            assert_eq!(msk.shape(), &[1, 16, 16]);
            assert!(msk.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        // the query image differs from every support image
        for (img, _) in &ep.supports {
            assert_ne!(img.data(), ep.query_image.data());
        }
    }
}
