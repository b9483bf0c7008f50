//! Scoring of recovered images: marker accuracy for silhouettes, mean
//! absolute pixel distance for reconstructions, a k-nearest-neighbour
//! recognition proxy and a column-normalized classification map.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imgio::{Image, Marker, SilhouetteImage};
use crate::{Error, Result};

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "{}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Fraction of pixels whose recovered marker matches the golden one; a
/// golden pixel is background exactly when its value is 0.
pub fn pixel_marker_accuracy(recovered: &SilhouetteImage, golden: &Image) -> Result<f64> {
    check_dims((recovered.width, recovered.height), golden.dims())?;
    if golden.channels != 1 {
        return Err(Error::Unsupported("multi-channel golden image".into()));
    }
    let hits = recovered
        .markers
        .iter()
        .zip(&golden.pixels)
        .filter(|(m, &v)| (**m == Marker::Background) == (v == 0))
        .count();
    Ok(hits as f64 / golden.len() as f64)
}

/// Mean of the per-class accuracies on golden background and foreground
/// pixels. Classes absent from the golden image are left out.
pub fn balanced_marker_accuracy(recovered: &SilhouetteImage, golden: &Image) -> Result<f64> {
    check_dims((recovered.width, recovered.height), golden.dims())?;
    let mut hit = [0usize; 2];
    let mut tot = [0usize; 2];
    for (m, &v) in recovered.markers.iter().zip(&golden.pixels) {
        let class = usize::from(v != 0);
        tot[class] += 1;
        if (*m == Marker::Foreground) == (class == 1) {
            hit[class] += 1;
        }
    }
    let rates: Vec<f64> = (0..2)
        .filter(|&c| tot[c] > 0)
        .map(|c| hit[c] as f64 / tot[c] as f64)
        .collect();
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Sum of absolute pixel differences.
pub fn l1_distance(a: &[u8], b: &[u8]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.abs_diff(y) as u64)
        .sum()
}

/// Mean absolute pixel difference.
pub fn pixel_value_distance(recovered: &Image, golden: &Image) -> Result<f64> {
    check_dims(recovered.dims(), golden.dims())?;
    if recovered.channels != golden.channels {
        return Err(Error::Dimension("channel count differs".into()));
    }
    Ok(l1_distance(&recovered.pixels, &golden.pixels) as f64 / golden.pixels.len() as f64)
}

/// Labelled reference images for nearest-neighbour recognition.
#[derive(Debug, Clone)]
pub struct KnnReference {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl KnnReference {
    pub fn new(images: &[Image], labels: &[u8]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::EmptyInput("empty reference set".into()))?;
        if images.len() != labels.len() {
            return Err(Error::Length(format!(
                "{} reference images, {} labels",
                images.len(),
                labels.len()
            )));
        }
        let mut pixels = Vec::with_capacity(first.len() * images.len());
        for img in images {
            check_dims(img.dims(), first.dims())?;
            pixels.extend_from_slice(&img.pixels);
        }
        Ok(Self {
            width: first.width,
            height: first.height,
            pixels,
            labels: labels.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Majority label among the `k` nearest references under L1 distance.
    /// Equal distances rank by reference order; tied votes go to the
    /// smallest label.
    pub fn classify(&self, img: &Image, k: usize) -> Result<u8> {
        check_dims(img.dims(), (self.width, self.height))?;
        if k == 0 || k % 2 == 0 {
            return Err(Error::Config(format!("k = {k} must be odd")));
        }
        let n = img.len();
        let mut best: Vec<(u64, usize)> = Vec::with_capacity(k + 1);
        for (i, r) in self.pixels.chunks_exact(n).enumerate() {
            let d = l1_distance(&img.pixels, r);
            if best.len() < k || (d, i) < best[best.len() - 1] {
                let pos = best.partition_point(|&e| e < (d, i));
                best.insert(pos, (d, i));
                best.truncate(k);
            }
        }
        let mut votes = [0usize; 256];
        for &(_, i) in &best {
            votes[self.labels[i] as usize] += 1;
        }
        let top = *votes.iter().max().unwrap();
        Ok(votes.iter().position(|&v| v == top).unwrap() as u8)
    }

    pub fn classify_all(&self, images: &[Image], k: usize) -> Result<Vec<u8>> {
        images.par_iter().map(|img| self.classify(img, k)).collect()
    }
}

/// Convenience wrapper building a one-off reference set.
pub fn knn_recognize(img: &Image, refs: &[Image], labels: &[u8], k: usize) -> Result<u8> {
    KnnReference::new(refs, labels)?.classify(img, k)
}

pub fn recognition_accuracy(predicted: &[u8], golden: &[u8]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(golden).filter(|(a, b)| a == b).count();
    hits as f64 / predicted.len() as f64
}

/// `cells[i][j]`: fraction of images of golden class `j` predicted as `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMap {
    pub cells: [[f64; 10]; 10],
    pub column_counts: [usize; 10],
}

impl ClassificationMap {
    /// Golden classes with no images; their columns are all zero.
    pub fn missing_classes(&self) -> Vec<u8> {
        (0..10u8)
            .filter(|&j| self.column_counts[j as usize] == 0)
            .collect()
    }

    /// Mean diagonal value over present classes.
    pub fn diagonal_mean(&self) -> f64 {
        let present: Vec<usize> = (0..10).filter(|&j| self.column_counts[j] > 0).collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().map(|&j| self.cells[j][j]).sum::<f64>() / present.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("predicted\\golden");
        for j in 0..10 {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for i in 0..10 {
            s.push_str(&i.to_string());
            for j in 0..10 {
                if self.column_counts[j] == 0 {
                    s.push_str(",NA");
                } else {
                    s.push_str(&format!(",{:.4}", self.cells[i][j]));
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn classification_map(predicted: &[u8], golden: &[u8]) -> Result<ClassificationMap> {
    if predicted.len() != golden.len() {
        return Err(Error::Length("prediction and label counts differ".into()));
    }
    let mut counts = [[0usize; 10]; 10];
    let mut column_counts = [0usize; 10];
    for (&p, &g) in predicted.iter().zip(golden) {
        if p > 9 || g > 9 {
            return Err(Error::Format(format!("label out of range: {p} / {g}")));
        }
        counts[p as usize][g as usize] += 1;
        column_counts[g as usize] += 1;
    }
    let mut cells = [[0.0; 10]; 10];
    for j in 0..10 {
        if column_counts[j] > 0 {
            for i in 0..10 {
                cells[i][j] = counts[i][j] as f64 / column_counts[j] as f64;
            }
        }
    }
    Ok(ClassificationMap {
        cells,
        column_counts,
    })
}

/// Per-image evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: usize,
    pub golden_label: Option<u8>,
    pub predicted: Option<u8>,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Name of the per-image metric (`pixel_accuracy` or `pixel_distance`).
    pub metric_name: String,
    pub rows: Vec<ImageScore>,
    pub mean_metric: f64,
    pub recognition_accuracy: Option<f64>,
    pub map: Option<ClassificationMap>,
}

impl EvalReport {
    pub fn new(metric_name: &str, rows: Vec<ImageScore>) -> Result<Self> {
        let mean_metric = if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| r.metric).sum::<f64>() / rows.len() as f64
        };
        let labelled: Vec<(u8, u8)> = rows
            .iter()
            .filter_map(|r| Some((r.predicted?, r.golden_label?)))
            .collect();
        let (recognition_accuracy, map) = if labelled.is_empty() {
            (None, None)
        } else {
            let (p, g): (Vec<u8>, Vec<u8>) = labelled.into_iter().unzip();
            (
                Some(recognition_accuracy(&p, &g)),
                Some(classification_map(&p, &g)?),
            )
        };
        Ok(Self {
            metric_name: metric_name.to_string(),
            rows,
            mean_metric,
            recognition_accuracy,
            map,
        })
    }

    pub fn rows_csv(&self) -> String {
        let opt = |v: Option<u8>| v.map_or(String::new(), |x| x.to_string());
        let mut s = format!("id,golden,predicted,{}\n", self.metric_name);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.6}\n",
                r.id,
                opt(r.golden_label),
                opt(r.predicted),
                r.metric
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        s.push_str(&format!("images,{}\n", self.rows.len()));
        s.push_str(&format!("mean_{},{:.6}\n", self.metric_name, self.mean_metric));
        if let Some(a) = self.recognition_accuracy {
            s.push_str(&format!("recognition_accuracy,{a:.6}\n"));
        }
        if let Some(m) = &self.map {
            s.push_str(&format!("map_diagonal_mean,{:.6}\n", m.diagonal_mean()));
        }
        s
    }
}
