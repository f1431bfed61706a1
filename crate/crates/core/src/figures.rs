//! Figure data: grayscale image grids (binary PGM) and latent-space tables.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{CcVae, OutputKind};
use crate::objectives::standard_noise;
use crate::tensor::Tensor;

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM: `P5\n<w> <h>\n255\n` followed by `w·h` bytes.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Dataset(format!("invalid PGM: {m}"));
        let mut fields = Vec::new();
        let mut at = 0;
        while fields.len() < 4 {
            while at < bytes.len() && bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            let start = at;
            while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if start == at {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("header"))?.to_string());
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad("expected P5 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let pixels = bytes.get(at + 1..).ok_or_else(|| bad("missing raster"))?.to_vec();
        if pixels.len() != width * height {
            return Err(bad("raster size does not match header"));
        }
        Ok(GrayImage { width, height, pixels })
    }
}

/// Side length of square image tiles for a model over `D = side²` binary pixels.
pub fn tile_side(m: &CcVae) -> Result<usize> {
    let d = m.arch.data_dim;
    let side = (d as f64).sqrt().round() as usize;
    if m.arch.output != OutputKind::Bernoulli || side * side != d {
        return Err(Error::Architecture(
            "image grids need a Bernoulli-output model over square images".into(),
        ));
    }
    Ok(side)
}

fn to_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lays out `tiles[r][c]` (each `side²` values in `[0, 1]`) edge to edge.
pub fn tile_grid(tiles: &[Vec<Tensor>], side: usize) -> Result<GrayImage> {
    let rows = tiles.len();
    let cols = tiles.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || tiles.iter().any(|r| r.len() != cols) {
        return Err(Error::Dataset("tile grid must be a non-empty rectangle".into()));
    }
    let (width, height) = (cols * side, rows * side);
    let mut pixels = vec![0u8; width * height];
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.numel() != side * side {
                return Err(Error::shape("tile", tile.shape(), &[side * side]));
            }
            for (k, &p) in tile.data().iter().enumerate() {
                let (i, j) = (k / side, k % side);
                pixels[(r * side + i) * width + c * side + j] = to_byte(p);
            }
        }
    }
    Ok(GrayImage { width, height, pixels })
}

/// Per class, `per_class` draws `z ~ p(z|y)` decoded to the mean of `p(x|z)`.
/// Returns the tiles as `[class][sample]`.
pub fn class_samples<R: Rng + ?Sized>(m: &CcVae, per_class: usize, rng: &mut R) -> Result<Vec<Vec<Tensor>>> {
    if per_class == 0 {
        return Err(Error::Config("need at least one sample per class".into()));
    }
    let k = m.arch.latent_dim;
    (0..m.arch.num_classes)
        .map(|y| {
            let prior = m.prior(y)?;
            let eps = standard_noise(rng, per_class, k);
            let sd = prior.std_dev();
            let mut z = eps.clone();
            for (idx, v) in z.data_mut().iter_mut().enumerate() {
                let j = idx % k;
                *v = prior.mean.data()[j] + sd.data()[j] * *v;
            }
            let means = m.decode_mean_batch(&z)?;
            (0..per_class).map(|i| Tensor::vector(means.row(i).to_vec())).collect()
        })
        .collect()
}

pub fn sample_grid<R: Rng + ?Sized>(m: &CcVae, per_class: usize, rng: &mut R) -> Result<GrayImage> {
    let side = tile_side(m)?;
    tile_grid(&class_samples(m, per_class, rng)?, side)
}

/// One row per consecutive class pair `k → k+1`, decoding the straight line
/// between the two prior means.
pub fn interpolation_grid(m: &CcVae, steps: usize) -> Result<GrayImage> {
    let side = tile_side(m)?;
    if m.arch.num_classes < 2 {
        return Err(Error::Architecture("interpolation needs at least two classes".into()));
    }
    let rows = (0..m.arch.num_classes - 1)
        .map(|y| {
            let zs = m.interpolate_latents(y, y + 1, steps)?;
            let z = Tensor::from_rows(&zs.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>())?;
            let means = m.decode_mean_batch(&z)?;
            (0..steps).map(|i| Tensor::vector(means.row(i).to_vec())).collect()
        })
        .collect::<Result<Vec<Vec<Tensor>>>>()?;
    tile_grid(&rows, side)
}

/// Mixture density `Σ_y p(y) N(z; µ_y, σ²_y)` on a square lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap {
    /// (z1, z2, density), row-major over z2 then z1
    pub points: Vec<(f64, f64, f64)>,
    pub cell_area: f64,
    /// Per class: mean and standard deviation of `p(z|y)`.
    pub priors: Vec<([f64; 2], [f64; 2])>,
}

impl LatentMap {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("z1,z2,density\n");
        for (a, b, d) in &self.points {
            writeln!(s, "{a},{b},{d}").unwrap();
        }
        s
    }

    pub fn priors_csv(&self) -> String {
        let mut s = String::from("class,mu1,mu2,sd1,sd2\n");
        for (y, (mu, sd)) in self.priors.iter().enumerate() {
            writeln!(s, "{y},{},{},{},{}", mu[0], mu[1], sd[0], sd[1]).unwrap();
        }
        s
    }

    /// Riemann sum of the density over the lattice.
    pub fn mass(&self) -> f64 {
        self.points.iter().map(|p| p.2).sum::<f64>() * self.cell_area
    }
}

/// Evaluates the class-prior mixture on `res × res` cell centers covering
/// every class mean ± `width` standard deviations.
pub fn latent_map(m: &CcVae, res: usize, width: f64) -> Result<LatentMap> {
    if m.arch.latent_dim != 2 {
        return Err(Error::Architecture(format!(
            "latent maps need a 2-dimensional latent space, model has {}",
            m.arch.latent_dim
        )));
    }
    if res < 2 || !(width > 0.0) {
        return Err(Error::Config("grid resolution must be at least 2 and width positive".into()));
    }
    let priors: Vec<_> = (0..m.arch.num_classes).map(|y| m.prior(y)).collect::<Result<_>>()?;
    let weights = m.class_prior()?;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in &priors {
        let sd = p.std_dev();
        for j in 0..2 {
            lo[j] = lo[j].min(p.mean.data()[j] - width * sd.data()[j]);
            hi[j] = hi[j].max(p.mean.data()[j] + width * sd.data()[j]);
        }
    }
    let step = [(hi[0] - lo[0]) / res as f64, (hi[1] - lo[1]) / res as f64];
    let mut points = Vec::with_capacity(res * res);
    for b in 0..res {
        let z2 = lo[1] + (b as f64 + 0.5) * step[1];
        for a in 0..res {
            let z1 = lo[0] + (a as f64 + 0.5) * step[0];
            let d: f64 = priors
                .iter()
                .zip(weights.probs.data())
                .map(|(p, w)| w * p.density(&[z1, z2]))
                .sum();
            points.push((z1, z2, d));
        }
    }
    let summary = priors
        .iter()
        .map(|p| {
            let sd = p.std_dev();
            ([p.mean.data()[0], p.mean.data()[1]], [sd.data()[0], sd.data()[1]])
        })
        .collect();
    Ok(LatentMap {
        points,
        cell_area: step[0] * step[1],
        priors: summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::DiagGaussian;
    use crate::model::tests::{randomize, small_arch};
    use crate::model::{names, HeadKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image_model(classes: usize, k: usize) -> CcVae {
        let mut arch = small_arch(HeadKind::Softmax, OutputKind::Bernoulli, classes);
        arch.latent_dim = k;
        let mut m = CcVae::init(arch, 1).unwrap();
        randomize(&mut m, 2);
        m
    }

    #[test]
    fn pgm_round_trip_is_byte_exact() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 255, 32, 9, 13],
        };
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(GrayImage::from_pgm(&bytes).unwrap(), img);
        assert!(GrayImage::from_pgm(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn sample_grid_shape_and_range() {
        let m = image_model(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tiles = class_samples(&m, 5, &mut rng).unwrap();
        assert_eq!((tiles.len(), tiles[0].len()), (3, 5));
        assert!(tiles.iter().flatten().flat_map(|t| t.data()).all(|&p| (0.0..=1.0).contains(&p)));
        let img = sample_grid(&m, 5, &mut rng).unwrap();
        assert_eq!((img.width, img.height), (10, 6));
        let one = sample_grid(&m, 1, &mut rng).unwrap();
        assert_eq!((one.width, one.height), (2, 6));
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 0);
    }

    #[test]
    fn non_image_models_are_rejected() {
        let g = CcVae::init(small_arch(HeadKind::Softmax, OutputKind::Gaussian, 2), 0).unwrap();
        assert!(sample_grid(&g, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut arch = small_arch(HeadKind::Softmax, OutputKind::Bernoulli, 2);
        arch.data_dim = 5;
        assert!(interpolation_grid(&CcVae::init(arch, 0).unwrap(), 3).is_err());
    }

    #[test]
    fn interpolation_rows_and_endpoints() {
        let m = image_model(4, 2);
        let img = interpolation_grid(&m, 2).unwrap();
        assert_eq!((img.width, img.height), (4, 6));
        // first column of row 0 is the decoded mean of class 0's prior
        let arche = m.decode(&m.prior(0).unwrap().mean).unwrap().mean();
        let want: Vec<u8> = arche.data().iter().map(|&p| to_byte(p)).collect();
        let got = [img.pixels[0], img.pixels[1], img.pixels[4], img.pixels[5]];
        assert_eq!(got.to_vec(), want);
        let m10 = image_model(10, 2);
        assert_eq!(interpolation_grid(&m10, 5).unwrap().height, 9 * 2);
    }

    #[test]
    fn latent_map_integrates_to_one() {
        let m = image_model(3, 2);
        let map = latent_map(&m, 200, 6.0).unwrap();
        assert_eq!(map.points.len(), 200 * 200);
        assert_eq!(map.to_csv().lines().count(), 200 * 200 + 1);
        assert!((map.mass() - 1.0).abs() < 5e-2, "{}", map.mass());
        assert_eq!(map.priors_csv().lines().count(), 4);
        assert!(latent_map(&image_model(3, 3), 10, 6.0).is_err());
    }

    #[test]
    fn single_class_map_is_that_gaussian() {
        let mut m = image_model(1, 2);
        m.params.set_value(names::PRIOR_MEAN, Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap()).unwrap();
        let map = latent_map(&m, 20, 4.0).unwrap();
        let g: DiagGaussian = m.prior(0).unwrap();
        for &(a, b, d) in &map.points {
            assert_eq!(d, g.density(&[a, b]));
        }
    }
}
