//! Tile corpora: class remapping, manifests, and the synthetic two-domain set.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

/// The seven classes shared by the source and target histology corpora.
pub const UNIFIED_CLASSES: [&str; 7] = ["ADI", "BACK", "DEB", "LYM", "NORM", "STR", "TUM"];

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "tif", "tiff", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassTarget {
    Unified(usize),
    Excluded,
}

/// Total map from a corpus' own class names onto a unified label space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub source_names: Vec<String>,
    pub unified_names: Vec<String>,
    pub mapping: Vec<ClassTarget>,
    /// Alternative spellings, each resolving to an index into `source_names`.
    aliases: Vec<(String, usize)>,
}

impl ClassMap {
    fn from_table(table: &[(&str, &[&str], Option<&str>)]) -> ClassMap {
        let unified_names: Vec<String> = UNIFIED_CLASSES.iter().map(|s| s.to_string()).collect();
        let mut source_names = Vec::new();
        let mut mapping = Vec::new();
        let mut aliases = Vec::new();
        for (i, (name, alts, target)) in table.iter().enumerate() {
            source_names.push(name.to_string());
            mapping.push(match target {
                Some(t) => ClassTarget::Unified(
                    UNIFIED_CLASSES
                        .iter()
                        .position(|u| u == t)
                        .expect("unified class in table"),
                ),
                None => ClassTarget::Excluded,
            });
            for alt in alts.iter() {
                aliases.push((alt.to_ascii_lowercase(), i));
            }
        }
        ClassMap {
            source_names,
            unified_names,
            mapping,
            aliases,
        }
    }

    /// Every class keeps its own index.
    pub fn identity<S: AsRef<str>>(names: &[S]) -> ClassMap {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        ClassMap {
            mapping: (0..names.len()).map(ClassTarget::Unified).collect(),
            unified_names: names.clone(),
            source_names: names,
            aliases: Vec::new(),
        }
    }

    /// Resolve a directory name (case-insensitive, aliases allowed).
    pub fn lookup(&self, name: &str) -> Option<ClassTarget> {
        let lower = name.to_ascii_lowercase();
        if let Some(i) = self
            .source_names
            .iter()
            .position(|s| s.to_ascii_lowercase() == lower)
        {
            return Some(self.mapping[i]);
        }
        self.aliases
            .iter()
            .find(|(a, _)| *a == lower)
            .map(|&(_, i)| self.mapping[i])
    }

    pub fn n_classes(&self) -> usize {
        self.unified_names.len()
    }
}

/// NCT-CRC-HE-100K style names: nine classes folded onto seven.
pub fn k19_to_unified() -> ClassMap {
    ClassMap::from_table(&[
        ("ADI", &["adipose"], Some("ADI")),
        ("BACK", &["background"], Some("BACK")),
        ("DEB", &["debris"], Some("DEB")),
        ("LYM", &["lymphocytes", "lymphocyte"], Some("LYM")),
        ("MUC", &["mucus"], Some("DEB")),
        ("MUS", &["muscle"], Some("STR")),
        ("NORM", &["normal", "normal_mucosa"], Some("NORM")),
        ("STR", &["stroma"], Some("STR")),
        ("TUM", &["tumour", "tumor"], Some("TUM")),
    ])
}

/// Kather 2016 texture tiles: eight classes, complex stroma excluded.
pub fn k16_to_unified() -> ClassMap {
    ClassMap::from_table(&[
        ("01_TUMOR", &["TUM", "tumor", "tumour"], Some("TUM")),
        ("02_STROMA", &["STR", "stroma"], Some("STR")),
        ("03_COMPLEX", &["COMP", "complex"], None),
        ("04_LYMPHO", &["LYM", "lympho", "lymphocytes"], Some("LYM")),
        ("05_DEBRIS", &["DEB", "debris"], Some("DEB")),
        ("06_MUCOSA", &["NORM", "mucosa"], Some("NORM")),
        ("07_ADIPOSE", &["ADI", "adipose"], Some("ADI")),
        ("08_EMPTY", &["BACK", "empty", "background"], Some("BACK")),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::All => "all",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        Some(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            "all" => Split::All,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class_label: usize,
    pub domain_id: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for e in &self.entries {
            counts[e.class_label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.class_label).collect()
    }

    pub fn domains(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.domain_id).collect()
    }

    /// Deterministic train/validation split keyed on the last two path
    /// components (class directory and file name), so it does not depend on
    /// where the corpus is mounted.
    pub fn split_train_val(&self, val_fraction: f64) -> (DatasetManifest, DatasetManifest) {
        let threshold = (val_fraction.clamp(0.0, 1.0) * 10_000.0).round() as u64;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for e in &self.entries {
            let key: Vec<_> = e.path.components().rev().take(2).collect();
            let key = format!("{:?}", key);
            if seed::mix64(seed::fnv1a(key.as_bytes())) % 10_000 < threshold {
                val.push(e.clone());
            } else {
                train.push(e.clone());
            }
        }
        let with = |entries, split| DatasetManifest {
            entries,
            class_names: self.class_names.clone(),
            split,
            warnings: Vec::new(),
        };
        (with(train, Split::Train), with(val, Split::Val))
    }

    pub fn concat(&self, other: &DatasetManifest) -> Result<DatasetManifest> {
        if self.class_names != other.class_names {
            return Err(Error::InvalidInput("manifests use different class lists".into()));
        }
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().cloned());
        Ok(DatasetManifest {
            entries,
            class_names: self.class_names.clone(),
            split: Split::All,
            warnings: [self.warnings.clone(), other.warnings.clone()].concat(),
        })
    }

    /// Line format: `#`-prefixed header records, then `path<TAB>class<TAB>domain`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#split\t{}", self.split.as_str());
        let _ = writeln!(out, "#classes\t{}", self.class_names.join(","));
        for w in &self.warnings {
            let _ = writeln!(out, "#warning\t{}", w.replace(['\t', '\n'], " "));
        }
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.path.display(), e.class_label, e.domain_id);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<DatasetManifest> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut manifest = DatasetManifest {
            entries: Vec::new(),
            class_names: Vec::new(),
            split: Split::All,
            warnings: Vec::new(),
        };
        let mut max_label = None::<usize>;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let (key, value) = header.split_once('\t').unwrap_or((header, ""));
                match key {
                    "split" => {
                        manifest.split = Split::parse(value)
                            .ok_or_else(|| err(lineno, format!("unknown split `{value}`")))?
                    }
                    "classes" => {
                        manifest.class_names = value
                            .split(',')
                            .filter(|s| !s.is_empty())
                            .map(str::to_string)
                            .collect()
                    }
                    "warning" => manifest.warnings.push(value.to_string()),
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(lineno, format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let class_label: usize = fields[1]
                .parse()
                .map_err(|_| err(lineno, format!("bad class `{}`", fields[1])))?;
            let domain_id: u8 = fields[2]
                .parse()
                .map_err(|_| err(lineno, format!("bad domain `{}`", fields[2])))?;
            max_label = Some(max_label.map_or(class_label, |m| m.max(class_label)));
            manifest.entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                class_label,
                domain_id,
            });
        }
        if manifest.class_names.is_empty() {
            let n = max_label.map_or(0, |m| m + 1);
            manifest.class_names = (0..n).map(|i| format!("class_{i}")).collect();
        }
        if let Some(m) = max_label {
            if m >= manifest.class_names.len() {
                return Err(err(0, format!("label {m} outside {} classes", manifest.class_names.len())));
            }
        }
        Ok(manifest)
    }
}

fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Scan `root/<class>/<tile>` and label every tile through `class_map`.
pub fn build_manifest(root: &Path, class_map: &ClassMap, domain_id: u8) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        entries: Vec::new(),
        class_names: class_map.unified_names.clone(),
        split: Split::All,
        warnings: Vec::new(),
    };
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        manifest
            .warnings
            .push(format!("no class directories under {}", root.display()));
        return Ok(manifest);
    }
    for dir in dirs {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::UnknownClass(dir.display().to_string()))?;
        let target = class_map
            .lookup(name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))?;
        let ClassTarget::Unified(label) = target else {
            continue;
        };
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|p| is_image_file(p))
            .collect();
        if files.is_empty() {
            manifest.warnings.push(format!("class directory `{name}` is empty"));
        }
        files.sort();
        manifest.entries.extend(files.into_iter().map(|path| ManifestEntry {
            path,
            class_label: label,
            domain_id,
        }));
    }
    manifest.entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_per_class: usize,
    pub n_classes: usize,
    pub image_size: usize,
}

pub fn synthetic_class_names(n_classes: usize) -> Vec<String> {
    (0..n_classes).map(|c| format!("class_{c}")).collect()
}

/// Optical densities (per RGB channel) of the two stains in each domain.
/// Source resembles a standard H&E palette; the target is a different
/// scanner/stain batch with shifted hue and weaker contrast.
const STAINS: [[[f32; 3]; 2]; 2] = [
    [[0.65, 0.70, 0.29], [0.07, 0.99, 0.11]],
    [[0.95, 0.55, 0.20], [0.55, 0.65, 0.05]],
];
const STAIN_STRENGTH: [f32; 2] = [1.0, 0.75];
const BACKGROUND: [[f32; 3]; 2] = [[0.96, 0.95, 0.97], [0.93, 0.96, 0.92]];

struct Disc {
    cy: f32,
    cx: f32,
    r: f32,
}

/// Render one procedural tile. The class fixes the tissue geometry (nuclei
/// density and size, fibre orientation, gland rings); the domain fixes the
/// stain colours used to turn stain densities into RGB.
pub fn render_synthetic_tile(class: usize, domain: u8, tile_seed: u64, size: usize) -> Image {
    let mut rng = seed::rng(tile_seed);
    let family = class % 4;
    let scale = 1.6f32.powi((class / 4) as i32);
    let n = size as f32;

    // Per-pixel (hematoxylin, eosin) densities.
    let mut hem = vec![0f32; size * size];
    let mut eos = vec![0f32; size * size];
    let base_eosin = 0.12 + 0.1 * family as f32 + rng.random_range(-0.03..0.03);
    eos.iter_mut().for_each(|e| *e = base_eosin);

    let stamp = |discs: &[Disc], map: &mut Vec<f32>, amount: f32, ring: Option<f32>| {
        for d in discs {
            let y0 = ((d.cy - d.r - 1.0).max(0.0)) as usize;
            let y1 = ((d.cy + d.r + 1.0).min(n - 1.0)) as usize;
            let x0 = ((d.cx - d.r - 1.0).max(0.0)) as usize;
            let x1 = ((d.cx + d.r + 1.0).min(n - 1.0)) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dist = ((y as f32 - d.cy).powi(2) + (x as f32 - d.cx).powi(2)).sqrt();
                    let inside = match ring {
                        None => (d.r - dist + 0.5).clamp(0.0, 1.0),
                        Some(w) => (w * 0.5 - (dist - d.r).abs() + 0.5).clamp(0.0, 1.0),
                    };
                    let v = &mut map[y * size + x];
                    *v = v.max(amount * inside);
                }
            }
        }
    };
    let random_discs = |rng: &mut seed::Rng, count: usize, r_lo: f32, r_hi: f32| -> Vec<Disc> {
        (0..count)
            .map(|_| Disc {
                cy: rng.random_range(0.0..n),
                cx: rng.random_range(0.0..n),
                r: rng.random_range(r_lo..r_hi),
            })
            .collect()
    };

    match family {
        // Dense small nuclei.
        0 => {
            let count = ((n * n) / (70.0 * scale * scale)) as usize;
            let discs = random_discs(&mut rng, count, 0.025 * n * scale, 0.035 * n * scale);
            stamp(&discs, &mut hem, 1.3, None);
        }
        // Large empty cells with thin walls.
        1 => {
            let count = ((n * n) / (600.0 * scale * scale)).max(3.0) as usize;
            let discs = random_discs(&mut rng, count, 0.1 * n * scale, 0.16 * n * scale);
            eos.iter_mut().for_each(|e| *e *= 0.3);
            stamp(&discs, &mut eos, 0.9, Some(0.02 * n));
            let nuclei = random_discs(&mut rng, count / 2 + 1, 0.015 * n, 0.025 * n);
            stamp(&nuclei, &mut hem, 0.9, None);
        }
        // Oriented fibres with a few elongated nuclei.
        2 => {
            let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
            let period = rng.random_range(0.07..0.10) * n * scale;
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (s, c) = theta.sin_cos();
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f32 * c + y as f32 * s) / period * std::f32::consts::TAU + phase;
                    eos[y * size + x] = base_eosin + 0.6 * (0.5 + 0.5 * t.sin()).powi(3);
                }
            }
            let count = ((n * n) / (900.0 * scale * scale)) as usize + 2;
            for _ in 0..count {
                let cy: f32 = rng.random_range(0.0..n);
                let cx: f32 = rng.random_range(0.0..n);
                let len = 0.06 * n * scale;
                let discs: Vec<Disc> = (-3..=3)
                    .map(|k| Disc {
                        cy: cy + s * len * k as f32 / 3.0,
                        cx: cx + c * len * k as f32 / 3.0,
                        r: 0.015 * n,
                    })
                    .collect();
                stamp(&discs, &mut hem, 1.0, None);
            }
        }
        // Glands: rings of nuclei around pale lumens.
        _ => {
            let count = ((n * n) / (1400.0 * scale * scale)).max(2.0) as usize;
            let glands = random_discs(&mut rng, count, 0.09 * n * scale, 0.14 * n * scale);
            for g in &glands {
                let beads = (g.r * std::f32::consts::TAU / (0.05 * n)).max(6.0) as usize;
                let ring: Vec<Disc> = (0..beads)
                    .map(|b| {
                        let a = b as f32 / beads as f32 * std::f32::consts::TAU;
                        Disc {
                            cy: g.cy + g.r * a.sin(),
                            cx: g.cx + g.r * a.cos(),
                            r: 0.022 * n,
                        }
                    })
                    .collect();
                stamp(&ring, &mut hem, 1.2, None);
                for y in 0..size {
                    for x in 0..size {
                        let d = ((y as f32 - g.cy).powi(2) + (x as f32 - g.cx).powi(2)).sqrt();
                        if d < g.r * 0.75 {
                            eos[y * size + x] *= 0.2;
                        }
                    }
                }
            }
        }
    }

    let d = domain.min(1) as usize;
    let [h_od, e_od] = STAINS[d];
    let strength = STAIN_STRENGTH[d] * rng.random_range(0.9..1.1);
    let noise = Normal::new(0.0f32, 0.02).expect("valid sigma");
    Image::from_fn(size, size, |y, x| {
        let i = y * size + x;
        let mut p = [0f32; 3];
        for c in 0..3 {
            let od = strength * (hem[i] * h_od[c] + eos[i] * e_od[c]);
            p[c] = (BACKGROUND[d][c] * (-od).exp() + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        p
    })
}

/// Write `out_dir/{source,target}/class_k/NNNNN.png` plus `source.tsv` and
/// `target.tsv`, returning the two manifests (domain 0 and domain 1).
pub fn generate_synthetic_two_domain(
    out_dir: &Path,
    spec: &SyntheticSpec,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if spec.n_classes < 2 || spec.n_per_class < 8 {
        return Err(Error::InvalidInput(format!(
            "synthetic set needs n_classes >= 2 and n_per_class >= 8 (got {} and {})",
            spec.n_classes, spec.n_per_class
        )));
    }
    let names = synthetic_class_names(spec.n_classes);
    let map = ClassMap::identity(&names);
    let data_seed = seed::derive(spec.seed, "synthetic");
    let mut manifests = Vec::new();
    for (domain, domain_dir) in [(0u8, "source"), (1u8, "target")] {
        let root = out_dir.join(domain_dir);
        for (class, name) in names.iter().enumerate() {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let class_seed = seed::derive_index(seed::derive_index(data_seed, domain as u64), class as u64);
            for i in 0..spec.n_per_class {
                let tile = render_synthetic_tile(
                    class,
                    domain,
                    seed::derive_index(class_seed, i as u64),
                    spec.image_size,
                );
                tile.save_png(&dir.join(format!("{i:05}.png")))?;
            }
        }
        let manifest = build_manifest(&root, &map, domain)?;
        manifest.save(&out_dir.join(format!("{domain_dir}.tsv")))?;
        manifests.push(manifest);
    }
    let target = manifests.pop().expect("two domains");
    let source = manifests.pop().expect("two domains");
    Ok((source, target))
}
