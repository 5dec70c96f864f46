//! Synthetic phantoms, the Poisson/Beer-Lambert measurement model and
//! dataset persistence.

use crate::error::{Error, Result};
use crate::linops::{LinearOperator, ScanGeometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Attenuation image in `[0, 1]` with recorded provenance.
#[derive(Clone, Debug)]
pub struct Phantom {
    image: Vec<f32>,
    pub size: usize,
    pub kind: PhantomKind,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    Ellipses,
    SheppLogan,
}

impl Phantom {
    pub fn image(&self) -> &[f32] {
        &self.image
    }
}

/// (intensity, semi-axis a, semi-axis b, center x, center y, rotation in deg)
/// of the standard modified head phantom.
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
];

fn ellipse_value(x: f64, y: f64, e: &(f64, f64, f64, f64, f64, f64)) -> f64 {
    let (val, a, b, cx, cy, deg) = *e;
    let phi = deg.to_radians();
    let dx = x - cx;
    let dy = y - cy;
    let xr = dx * phi.cos() + dy * phi.sin();
    let yr = -dx * phi.sin() + dy * phi.cos();
    if (xr / a).powi(2) + (yr / b).powi(2) <= 1.0 {
        val
    } else {
        0.0
    }
}

/// Generates a deterministic synthetic phantom. Ellipse phantoms sum 3-8
/// random ellipses with small attenuation values so that typical line
/// integrals stay in a regime where low-dose photon counts remain
/// informative; values are clipped to `[0, 1]`.
pub fn make_phantom(kind: PhantomKind, size: usize, seed: u64) -> Result<Phantom> {
    if size < 8 {
        return Err(Error::Config("phantom size must be >= 8".into()));
    }
    let mut image = vec![0.0f32; size * size];
    match kind {
        PhantomKind::SheppLogan => {
            for r in 0..size {
                for c in 0..size {
                    // Pixel centers mapped to [-1, 1]^2, y up.
                    let x = (c as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                    let y = 1.0 - (r as f64 + 0.5) / size as f64 * 2.0;
                    let mut v = 0.0;
                    for e in &SHEPP_LOGAN {
                        v += ellipse_value(x, y, e);
                    }
                    image[r * size + c] = (v.clamp(0.0, 1.0)) as f32;
                }
            }
        }
        PhantomKind::Ellipses => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = rng.gen_range(3..=8);
            let ellipses: Vec<(f64, f64, f64, f64, f64, f64)> = (0..count)
                .map(|_| {
                    let val = rng.gen_range(0.015..0.08);
                    let a = rng.gen_range(0.08..0.45);
                    let b = rng.gen_range(0.08..0.45);
                    let cx = rng.gen_range(-0.55..0.55);
                    let cy = rng.gen_range(-0.55..0.55);
                    let deg = rng.gen_range(0.0..180.0);
                    (val, a, b, cx, cy, deg)
                })
                .collect();
            for r in 0..size {
                for c in 0..size {
                    let x = (c as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                    let y = 1.0 - (r as f64 + 0.5) / size as f64 * 2.0;
                    let mut v = 0.0;
                    for e in &ellipses {
                        v += ellipse_value(x, y, e);
                    }
                    image[r * size + c] = (v.clamp(0.0, 1.0)) as f32;
                }
            }
        }
    }
    Ok(Phantom {
        image,
        size,
        kind,
        seed,
    })
}

/// Measurement noise model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// `counts ~ Poisson(i0 * exp(-Ax))`, clamped to >= 1, log-linearized.
    PoissonBeerLambert { i0: f64 },
    Gaussian { sigma: f64 },
    None,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::PoissonBeerLambert { i0 } if !(*i0 > 0.0) => {
                Err(Error::Config("photon count i0 must be positive".into()))
            }
            NoiseModel::Gaussian { sigma } if !(*sigma >= 0.0) => {
                Err(Error::Config("noise sigma must be nonnegative".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Simulates a log-linearized sinogram from a phantom.
pub fn simulate_measurement(
    phantom: &Phantom,
    op: &LinearOperator,
    noise: NoiseModel,
    seed: u64,
) -> Result<Vec<f32>> {
    noise.validate()?;
    let line_integrals = op.apply(phantom.image())?;
    if line_integrals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite line integrals".into()));
    }
    match noise {
        NoiseModel::None => Ok(line_integrals),
        NoiseModel::Gaussian { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = rand_distr::Normal::new(0.0f64, sigma).expect("validated sigma");
            Ok(line_integrals
                .iter()
                .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
                .collect())
        }
        NoiseModel::PoissonBeerLambert { i0 } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = line_integrals
                .iter()
                .map(|&v| {
                    let lambda = i0 * (-v as f64).exp();
                    let counts = if lambda <= 0.0 {
                        0.0
                    } else {
                        Poisson::new(lambda).expect("positive mean").sample(&mut rng)
                    };
                    let clamped = counts.max(1.0);
                    (-(clamped / i0).ln()) as f32
                })
                .collect();
            Ok(b)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One measurement with its FBP initialization and optional ground truth.
#[derive(Clone, Debug)]
pub struct DataItem {
    pub sinogram: Vec<f32>,
    pub fbp_init: Vec<f32>,
    pub truth: Option<Vec<f32>>,
    pub split: Split,
}

/// A simulated dataset tied to one geometry and noise configuration.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub geometry: ScanGeometry,
    pub noise: NoiseModel,
    pub items: Vec<DataItem>,
}

impl Dataset {
    pub fn split_items(&self, split: Split) -> Vec<&DataItem> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    /// Drops all ground-truth arrays, leaving a measurements-only dataset.
    pub fn into_measurements_only(self) -> MeasurementDataset {
        MeasurementDataset {
            geometry: self.geometry,
            noise: self.noise,
            items: self
                .items
                .into_iter()
                .map(|it| MeasurementItem {
                    sinogram: it.sinogram,
                    fbp_init: it.fbp_init,
                    split: it.split,
                })
                .collect(),
        }
    }
}

/// Measurement-only view used for ground-truth-free training: the type has
/// no field through which truth images could be read.
#[derive(Clone, Debug)]
pub struct MeasurementDataset {
    pub geometry: ScanGeometry,
    pub noise: NoiseModel,
    pub items: Vec<MeasurementItem>,
}

#[derive(Clone, Debug)]
pub struct MeasurementItem {
    pub sinogram: Vec<f32>,
    pub fbp_init: Vec<f32>,
    pub split: Split,
}

impl MeasurementDataset {
    pub fn split_items(&self, split: Split) -> Vec<&MeasurementItem> {
        self.items.iter().filter(|it| it.split == split).collect()
    }
}

const DATASET_MAGIC: &[u8; 8] = b"LSPDDS01";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    geometry: ScanGeometry,
    noise: NoiseModel,
    n_items: usize,
    splits: Vec<Split>,
    has_truth: Vec<bool>,
}

fn write_array(w: &mut impl Write, dims: &[u32], data: &[f32]) -> Result<()> {
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read) -> Result<(Vec<u32>, Vec<f32>)> {
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let ndim = u32::from_le_bytes(buf4) as usize;
    if ndim > 8 {
        return Err(Error::DatasetFormat("implausible array rank".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut buf4)?;
        dims.push(u32::from_le_bytes(buf4));
    }
    let len = dims.iter().map(|&d| d as usize).product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut buf4)?;
        data.push(f32::from_le_bytes(buf4));
    }
    Ok((dims, data))
}

/// Saves a dataset: magic, version, JSON header, then raw array blocks.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    let header = DatasetHeader {
        geometry: ds.geometry.clone(),
        noise: ds.noise,
        n_items: ds.items.len(),
        splits: ds.items.iter().map(|it| it.split).collect(),
        has_truth: ds.items.iter().map(|it| it.truth.is_some()).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let size = ds.geometry.image_size as u32;
    let (na, nr) = (ds.geometry.n_angles as u32, ds.geometry.n_rays as u32);
    for item in &ds.items {
        write_array(&mut w, &[na, nr], &item.sinogram)?;
        write_array(&mut w, &[size, size], &item.fbp_init)?;
        if let Some(truth) = &item.truth {
            write_array(&mut w, &[size, size], truth)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a dataset saved by [`save_dataset`]. Truncated or foreign files
/// error out without returning a partial dataset.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::DatasetFormat("bad magic".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != DATASET_VERSION {
        return Err(Error::DatasetFormat(format!("unsupported version {version}")));
    }
    r.read_exact(&mut buf4)?;
    let header_len = u32::from_le_bytes(buf4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)?;
    let mut items = Vec::with_capacity(header.n_items);
    for i in 0..header.n_items {
        let (_, sinogram) = read_array(&mut r)?;
        let (_, fbp_init) = read_array(&mut r)?;
        let truth = if header.has_truth[i] {
            Some(read_array(&mut r)?.1)
        } else {
            None
        };
        items.push(DataItem {
            sinogram,
            fbp_init,
            truth,
            split: header.splits[i],
        });
    }
    Ok(Dataset {
        geometry: header.geometry,
        noise: header.noise,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{assemble_projector, ScanGeometry};

    #[test]
    fn phantoms_are_deterministic_and_clipped() {
        for seed in 0..100 {
            let a = make_phantom(PhantomKind::Ellipses, 16, seed).unwrap();
            let b = make_phantom(PhantomKind::Ellipses, 16, seed).unwrap();
            assert_eq!(a.image(), b.image());
            assert!(a.image().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn shepp_logan_center_matches_analytic_table() {
        // Independent oracle: evaluate the published ellipse table directly
        // at the center pixel coordinate.
        let size = 64;
        let phantom = make_phantom(PhantomKind::SheppLogan, size, 0).unwrap();
        let r = size / 2;
        let c = size / 2;
        let x = (c as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        let y = 1.0 - (r as f64 + 0.5) / size as f64 * 2.0;
        let table = [
            (1.0, 0.69, 0.92, 0.0, 0.0, 0.0f64),
            (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
            (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
            (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
            (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
            (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
            (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
            (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
            (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
            (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
        ];
        let mut expected = 0.0f64;
        for (val, a, b, cx, cy, deg) in table {
            let phi = deg.to_radians();
            let dx = x - cx;
            let dy = y - cy;
            let xr = dx * phi.cos() + dy * phi.sin();
            let yr = -dx * phi.sin() + dy * phi.cos();
            if (xr / a).powi(2) + (yr / b).powi(2) <= 1.0 {
                expected += val;
            }
        }
        assert!((phantom.image()[r * size + c] as f64 - expected).abs() < 1e-6);
        assert!((expected - 0.2).abs() < 1e-12, "center should be 0.2");
    }

    #[test]
    fn noiseless_measurement_is_exactly_consistent() {
        let geom = ScanGeometry::parallel(16, 8, 16);
        let op = assemble_projector(&geom).unwrap();
        let phantom = make_phantom(PhantomKind::Ellipses, 16, 3).unwrap();
        let b = simulate_measurement(&phantom, &op, NoiseModel::None, 0).unwrap();
        let ax = op.apply(phantom.image()).unwrap();
        assert_eq!(b, ax);
    }

    #[test]
    fn high_dose_limit_approaches_clean_data() {
        let geom = ScanGeometry::parallel(64, 12, 64);
        let op = assemble_projector(&geom).unwrap();
        let phantom = make_phantom(PhantomKind::Ellipses, 64, 7).unwrap();
        let clean = op.apply(phantom.image()).unwrap();
        let noisy =
            simulate_measurement(&phantom, &op, NoiseModel::PoissonBeerLambert { i0: 1e9 }, 5)
                .unwrap();
        let mut max_rel = 0.0f64;
        for (&c, &n) in clean.iter().zip(&noisy) {
            if c.abs() > 1e-3 {
                max_rel = max_rel.max(((c - n) / c).abs() as f64);
            }
        }
        assert!(max_rel <= 1e-3, "max relative deviation {max_rel}");
    }

    #[test]
    fn poisson_mean_at_zero_attenuation_is_i0() {
        // A ray with zero line integral has E[counts] = i0.
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let i0 = 1000.0f64;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let poisson = rand_distr::Poisson::new(i0).unwrap();
        let n = 10_000;
        let mean: f64 = (0..n).map(|_| poisson.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - i0).abs() / i0 < 0.01, "poisson mean {mean}");
    }

    #[test]
    fn log_linearization_inverts_to_clamped_counts() {
        let geom = ScanGeometry::parallel(32, 8, 32);
        let op = assemble_projector(&geom).unwrap();
        let phantom = make_phantom(PhantomKind::Ellipses, 32, 11).unwrap();
        let i0 = 1.0e4;
        let b = simulate_measurement(&phantom, &op, NoiseModel::PoissonBeerLambert { i0 }, 3)
            .unwrap();
        for &bv in &b {
            let counts = (-bv as f64).exp() * i0;
            let rounded = counts.round();
            assert!(
                (counts - rounded).abs() < 1e-2,
                "recovered count {counts} is not integral"
            );
            assert!(rounded >= 1.0, "counts were clamped at 1");
        }
    }

    #[test]
    fn dataset_roundtrip_is_bitwise() {
        let geom = ScanGeometry::parallel(8, 4, 8);
        let ds = Dataset {
            geometry: geom,
            noise: NoiseModel::None,
            items: vec![
                DataItem {
                    sinogram: vec![1.5; 32],
                    fbp_init: vec![0.25; 64],
                    truth: Some(vec![0.5; 64]),
                    split: Split::Train,
                },
                DataItem {
                    sinogram: vec![-0.5; 32],
                    fbp_init: vec![0.125; 64],
                    truth: None,
                    split: Split::Test,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.items.len(), 2);
        assert_eq!(loaded.items[0].sinogram, ds.items[0].sinogram);
        assert_eq!(loaded.items[0].truth, ds.items[0].truth);
        assert_eq!(loaded.items[1].truth, None);
        assert_eq!(loaded.items[1].split, Split::Test);
    }

    #[test]
    fn truncated_file_errors_without_partial_data() {
        let geom = ScanGeometry::parallel(8, 4, 8);
        let ds = Dataset {
            geometry: geom,
            noise: NoiseModel::None,
            items: vec![DataItem {
                sinogram: vec![1.0; 32],
                fbp_init: vec![0.0; 64],
                truth: Some(vec![0.0; 64]),
                split: Split::Train,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn foreign_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        std::fs::write(&path, b"NOTADATASET").unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("unrecognized dataset file"));
    }

    #[test]
    fn measurement_only_view_has_no_truth_field() {
        let geom = ScanGeometry::parallel(8, 4, 8);
        let ds = Dataset {
            geometry: geom,
            noise: NoiseModel::None,
            items: vec![DataItem {
                sinogram: vec![1.0; 32],
                fbp_init: vec![0.0; 64],
                truth: Some(vec![0.9; 64]),
                split: Split::Train,
            }],
        };
        let mo = ds.into_measurements_only();
        // The type system is the guarantee; this just exercises the view.
        assert_eq!(mo.items.len(), 1);
        assert_eq!(mo.items[0].sinogram, vec![1.0; 32]);
    }
}
