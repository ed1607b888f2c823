//! Principal-component export of embedding geometry: fit on the
//! original samples of a class subset, then project originals and the
//! synthetic samples mixed from that subset onto the top components.
//!
//! The eigendecomposition is a cyclic Jacobi sweep written here rather
//! than pulled from a linear-algebra crate, so the test suite can check
//! it against an independent solver instead of against itself.

use std::io::{BufWriter, Write as _};
use std::path::Path;

use crate::data::{AugmentedDataset, Provenance};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// A fitted projection: row-major components (k x d), the fit mean, and
/// the variance ledger.
#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` rows of length `d`, orthonormal, ordered by decreasing
    /// explained variance. Sign convention: the coordinate of largest
    /// magnitude in each component is positive.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Fractions of the total variance (trace of the covariance).
    pub explained_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|g| {
                x.iter()
                    .zip(&self.mean)
                    .zip(g)
                    .map(|((xi, mi), gi)| (xi - mi) * gi)
                    .sum()
            })
            .collect()
    }
}

/// One exported point.
#[derive(Debug, Clone)]
pub struct PcaRow {
    pub sample_id: String,
    pub provenance: Provenance,
    pub label: Option<usize>,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PcaExport {
    pub model: PcaModel,
    pub rows: Vec<PcaRow>,
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    v
}

#[allow(clippy::needless_range_loop)]
fn off_diagonal_norm(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i][j] * a[i][j];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues (diagonal after convergence) and the rotation product
/// whose columns are the eigenvectors, unsorted.
#[allow(clippy::needless_range_loop)] // index pairs update two rows/columns in place
fn jacobi_eigendecomposition(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = identity(n);
    if n < 2 {
        return (a.iter().enumerate().map(|(i, r)| r[i]).collect(), v);
    }
    let frob: f64 = a
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let tol = 1e-14 * (1.0 + frob);
    for _sweep in 0..100 {
        if off_diagonal_norm(&a) <= tol {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- R' A R, applied as column then row rotations.
                for r in 0..n {
                    let arp = a[r][p];
                    let arq = a[r][q];
                    a[r][p] = c * arp - s * arq;
                    a[r][q] = s * arp + c * arq;
                }
                for col in 0..n {
                    let apc = a[p][col];
                    let aqc = a[q][col];
                    a[p][col] = c * apc - s * aqc;
                    a[q][col] = s * apc + c * aqc;
                }
                for r in 0..n {
                    let vrp = v[r][p];
                    let vrq = v[r][q];
                    v[r][p] = c * vrp - s * vrq;
                    v[r][q] = s * vrp + c * vrq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Fit a k-component PCA on row vectors. Covariance uses the unbiased
/// divisor M-1, so at least two rows are required.
#[allow(clippy::needless_range_loop)] // symmetric triangle fill
pub fn fit_pca(rows: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let m = rows.len();
    if m < 2 {
        return Err(Error::Export(format!(
            "principal-component fit needs at least 2 samples, got {m}"
        )));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Export("ragged rows in principal-component fit".into()));
    }
    if k == 0 || k > d {
        return Err(Error::Export(format!(
            "component count {k} outside [1, {d}]"
        )));
    }

    let mut mean = vec![0.0; d];
    for r in rows {
        for (mi, xi) in mean.iter_mut().zip(r) {
            *mi += xi;
        }
    }
    for mi in &mut mean {
        *mi /= m as f64;
    }

    // Covariance C = X'X / (M-1) over centered rows.
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        let centered: Vec<f64> = r.iter().zip(&mean).map(|(x, mu)| x - mu).collect();
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i][j] += ci * centered[j];
            }
        }
    }
    let denom = (m - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i][i]).sum();

    let (eigvals, eigvecs) = jacobi_eigendecomposition(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eigvals[j].total_cmp(&eigvals[i]));

    let mut components = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut comp: Vec<f64> = (0..d).map(|r| eigvecs[r][idx]).collect();
        // Deterministic sign: the largest-magnitude coordinate points
        // in the positive direction; ties go to the lowest index.
        let lead = comp
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.abs()
                    .total_cmp(&b.abs())
                    .then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .unwrap();
        if comp[lead] < 0.0 {
            for c in &mut comp {
                *c = -*c;
            }
        }
        components.push(comp);
        // Rounding can push a zero eigenvalue slightly negative.
        explained.push(eigvals[idx].max(0.0));
    }
    let explained_ratio = explained
        .iter()
        .map(|&ev| if total_variance > 0.0 { ev / total_variance } else { 0.0 })
        .collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance: explained,
        explained_ratio,
    })
}

/// Embed every sample of the class subset with the model's encoder, fit
/// the projection on the original samples only, and project originals
/// plus the synthetic samples both of whose sources lie in the subset.
/// Synthetic samples without recorded sources (externally produced)
/// cannot prove membership and are left out.
pub fn export_pca(
    model: &Model,
    aug: &AugmentedDataset,
    class_subset: &[usize],
    k: usize,
) -> Result<PcaExport> {
    if class_subset.is_empty() {
        return Err(Error::Export("class subset is empty".into()));
    }
    let num_classes = aug.originals.num_classes;
    let mut in_subset = vec![false; num_classes];
    for &c in class_subset {
        if c >= num_classes {
            return Err(Error::Export(format!(
                "class {c} outside the task's {num_classes} classes"
            )));
        }
        in_subset[c] = true;
    }

    let keep_original: Vec<usize> = aug
        .originals
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label.is_some_and(|l| in_subset[l]))
        .map(|(i, _)| i)
        .collect();
    if keep_original.is_empty() {
        return Err(Error::Export("class subset matches no samples".into()));
    }
    let keep_synth: Vec<usize> = aug
        .synthetics
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.source_ids.is_some_and(|(a, b)| {
                let la = aug.originals.samples[a].label;
                let lb = aug.originals.samples[b].label;
                la.is_some_and(|l| in_subset[l]) && lb.is_some_and(|l| in_subset[l])
            })
        })
        .map(|(i, _)| i)
        .collect();

    let embed_batch = |samples: &[&crate::data::Sample]| -> Result<Vec<Vec<f64>>> {
        let d = samples[0].features.len();
        let mut data = Vec::with_capacity(samples.len() * d);
        for s in samples {
            data.extend_from_slice(&s.features);
        }
        let x = Tensor::new(vec![samples.len(), d], data)?;
        let emb = model.embed(&x)?;
        let ed = emb.cols();
        Ok(emb.data.chunks(ed).map(<[f64]>::to_vec).collect())
    };

    let orig_refs: Vec<&crate::data::Sample> = keep_original
        .iter()
        .map(|&i| &aug.originals.samples[i])
        .collect();
    let orig_emb = embed_batch(&orig_refs)?;
    let pca = fit_pca(&orig_emb, k)?;

    let mut rows = Vec::with_capacity(keep_original.len() + keep_synth.len());
    for (&i, emb) in keep_original.iter().zip(&orig_emb) {
        rows.push(PcaRow {
            sample_id: format!("orig-{i}"),
            provenance: Provenance::Original,
            label: aug.originals.samples[i].label,
            coords: pca.project(emb),
        });
    }
    if !keep_synth.is_empty() {
        let syn_refs: Vec<&crate::data::Sample> =
            keep_synth.iter().map(|&i| &aug.synthetics[i]).collect();
        let syn_emb = embed_batch(&syn_refs)?;
        for (&i, emb) in keep_synth.iter().zip(&syn_emb) {
            rows.push(PcaRow {
                sample_id: format!("syn-{i}"),
                provenance: Provenance::Synthetic,
                label: aug.synthetics[i].label,
                coords: pca.project(emb),
            });
        }
    }
    Ok(PcaExport { model: pca, rows })
}

/// Write the projected points as comma-separated text, one row per
/// sample, full float precision.
pub fn write_pca_csv(path: &Path, export: &PcaExport) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    let k = export.model.components.len();
    write!(w, "sample_id,provenance,label")?;
    for i in 1..=k {
        write!(w, ",pc{i}")?;
    }
    writeln!(w)?;
    for row in &export.rows {
        let prov = match row.provenance {
            Provenance::Original => "original",
            Provenance::Synthetic => "synthetic",
        };
        let label = row
            .label
            .map_or_else(|| "-".to_string(), |l| l.to_string());
        write!(w, "{},{},{}", row.sample_id, prov, label)?;
        for c in &row.coords {
            write!(w, ",{c:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Write the per-component variance ledger next to the projection.
pub fn write_pca_variance_csv(path: &Path, export: &PcaExport) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    writeln!(w, "component,explained_variance,explained_ratio")?;
    for (i, (ev, r)) in export
        .model
        .explained_variance
        .iter()
        .zip(&export.model.explained_ratio)
        .enumerate()
    {
        writeln!(w, "{},{ev:.16e},{r:.16e}", i + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_augmented, LabeledDataset, MixerKind, MixerSpec, Sample, Split};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
        (0..m)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect()
    }

    #[test]
    fn line_along_first_axis_recovers_that_axis() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64, 0.0, 0.0, 0.0])
            .collect();
        let pca = fit_pca(&rows, 2).unwrap();
        let c0 = &pca.components[0];
        assert!((c0[0] - 1.0).abs() < 1e-10, "first component {c0:?}");
        for &c in &c0[1..] {
            assert!(c.abs() < 1e-10);
        }
        assert!((pca.explained_ratio[0] - 1.0).abs() < 1e-12);
        assert!(pca.explained_variance[1].abs() < 1e-12);
    }

    #[test]
    fn components_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let rows = random_rows(&mut rng, 30, 7);
            let pca = fit_pca(&rows, 7).unwrap();
            for i in 0..7 {
                for j in 0..7 {
                    let dot: f64 = pca.components[i]
                        .iter()
                        .zip(&pca.components[j])
                        .map(|(a, b)| a * b)
                        .sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (dot - want).abs() < 1e-8,
                        "G G' [{i}][{j}] = {dot}"
                    );
                }
            }
        }
    }

    #[test]
    fn explained_variances_are_non_increasing_and_sum_to_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = random_rows(&mut rng, 50, 6);
        let pca = fit_pca(&rows, 6).unwrap();
        for w in pca.explained_variance.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
        let ratio_sum: f64 = pca.explained_ratio.iter().sum();
        assert!((ratio_sum - 1.0).abs() < 1e-8);
    }

    #[test]
    fn eigenvalues_match_an_independent_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let d = 6;
            let rows = random_rows(&mut rng, 40, d);
            let pca = fit_pca(&rows, d).unwrap();

            // Rebuild the covariance the same way and hand it to a
            // completely separate eigensolver.
            let m = rows.len();
            let mut mean = vec![0.0; d];
            for r in &rows {
                for (mi, xi) in mean.iter_mut().zip(r) {
                    *mi += xi / m as f64;
                }
            }
            let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
            for r in &rows {
                let c: Vec<f64> = r.iter().zip(&mean).map(|(x, mu)| x - mu).collect();
                for i in 0..d {
                    for j in 0..d {
                        cov[(i, j)] += c[i] * c[j] / (m - 1) as f64;
                    }
                }
            }
            let mut oracle: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
            oracle.sort_by(|a, b| b.total_cmp(a));
            for (mine, theirs) in pca.explained_variance.iter().zip(&oracle) {
                assert!(
                    (mine - theirs).abs() < 1e-8,
                    "eigenvalue {mine} vs oracle {theirs}"
                );
            }
        }
    }

    #[test]
    fn projection_of_the_mean_is_the_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows = random_rows(&mut rng, 25, 5);
        let pca = fit_pca(&rows, 3).unwrap();
        let coords = pca.project(&pca.mean.clone());
        for c in coords {
            assert!(c.abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_fits_are_rejected() {
        assert!(fit_pca(&[vec![1.0, 2.0]], 1).is_err());
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert!(fit_pca(&rows, 3).is_err());
        assert!(fit_pca(&rows, 0).is_err());
    }

    fn toy_task() -> LabeledDataset {
        // Three well-separated classes in 4 dims, 6 samples each.
        let mut samples = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for c in 0..3usize {
            for _ in 0..6 {
                let mut x = vec![0.0; 4];
                x[c] = 5.0;
                for xi in &mut x {
                    *xi += rng.gen_range(-0.3..0.3);
                }
                samples.push(Sample::original(x, c));
            }
        }
        LabeledDataset {
            samples,
            num_classes: 3,
            split: Split::Train,
        }
    }

    fn identity_model() -> Model {
        use crate::nn::{EncoderSpec, HeadKind, HeadSpec};
        Model::build(
            EncoderSpec {
                input_dim: 4,
                hidden_widths: vec![8],
                activation: Default::default(),
                output_dim: 4,
            },
            HeadSpec {
                kind: HeadKind::Linear,
                n_in: 4,
                n_out: 3,
                n_hidden: None,
                activation: Default::default(),
            },
            3,
            4,
        )
        .unwrap()
    }

    #[test]
    fn subset_filtering_keeps_matching_synthetics_only() {
        let train = toy_task();
        let mixer = MixerSpec {
            kind: MixerKind::IntraClass,
            ..MixerSpec::default()
        };
        let aug = build_augmented(&train, &mixer, 12, 7, None).unwrap();
        let model = identity_model();

        let export = export_pca(&model, &aug, &[0, 1], 2).unwrap();
        let n_orig = export
            .rows
            .iter()
            .filter(|r| r.provenance == Provenance::Original)
            .count();
        assert_eq!(n_orig, 12, "6 samples per subset class");
        // Intra-class synthetics carry their class; every kept one must
        // come from subset classes.
        for row in &export.rows {
            if row.provenance == Provenance::Synthetic {
                assert!(matches!(row.label, Some(0) | Some(1)));
            }
            assert_eq!(row.coords.len(), 2);
        }
    }

    #[test]
    fn empty_subset_and_unknown_class_are_export_errors() {
        let train = toy_task();
        let aug = crate::data::AugmentedDataset::originals_only(train);
        let model = identity_model();
        assert!(matches!(
            export_pca(&model, &aug, &[], 2),
            Err(Error::Export(_))
        ));
        assert!(matches!(
            export_pca(&model, &aug, &[9], 2),
            Err(Error::Export(_))
        ));
    }

    #[test]
    fn csv_writers_emit_one_line_per_row() {
        let train = toy_task();
        let aug = crate::data::AugmentedDataset::originals_only(train);
        let model = identity_model();
        let export = export_pca(&model, &aug, &[0, 1, 2], 2).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("pca.csv");
        let p2 = dir.path().join("pca_variance.csv");
        write_pca_csv(&p1, &export).unwrap();
        write_pca_variance_csv(&p2, &export).unwrap();
        let body = std::fs::read_to_string(&p1).unwrap();
        assert_eq!(body.lines().count(), 1 + export.rows.len());
        let var = std::fs::read_to_string(&p2).unwrap();
        assert_eq!(var.lines().count(), 1 + 2);
    }
}
