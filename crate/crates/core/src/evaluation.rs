//! Prediction with any of the trained model kinds and per-subgroup
//! evaluation of the resulting masks.

use fairseg_nn::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::apple::PerturbationGenerator;
use crate::data::SegDataset;
use crate::error::{FairsegError, Result};
use crate::metrics::{fairness, foreground_dice, subgroup_utilities, Ddof, FairnessReport, UtilityVector};
use crate::segmentor::{LatentVars, UNet};

const EVAL_BATCH: usize = 32;

/// A trained model that maps images to class-id masks.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Segmentor(&'a UNet),
    /// `D_s(f_o + G_p(f_o))`.
    Apple(&'a UNet, &'a PerturbationGenerator),
    /// One segmentor per subgroup, chosen by the sample's attribute.
    Subgroup(&'a [UNet]),
}

impl Predictor<'_> {
    /// Whether inference needs the sensitive attribute.
    pub fn requires_attribute(&self) -> bool {
        matches!(self, Predictor::Subgroup(_))
    }

    /// Class logits `[B, L, H, W]`.
    pub fn logits(&self, images: &Tensor, attrs: &[usize]) -> Result<Tensor> {
        match *self {
            Predictor::Segmentor(net) => net.logits(images),
            Predictor::Apple(net, gp) => apple_logits(net, gp, images),
            Predictor::Subgroup(models) => {
                let b = images.shape()[0];
                if attrs.len() != b {
                    return Err(FairsegError::Invalid(
                        "subgroup models need the attribute of every sample".into(),
                    ));
                }
                let mut parts = Vec::with_capacity(b);
                for (i, &a) in attrs.iter().enumerate() {
                    let model = models.get(a).ok_or_else(|| {
                        FairsegError::Invalid(format!("no subgroup model for attribute {a}"))
                    })?;
                    parts.push(model.logits(&images.narrow_batch(i, 1))?);
                }
                Ok(Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())?)
            }
        }
    }

    /// Argmax masks, flattened `B*H*W`.
    pub fn predict(&self, images: &Tensor, attrs: &[usize]) -> Result<Vec<usize>> {
        Ok(self.logits(images, attrs)?.argmax_channels())
    }
}

fn apple_logits(net: &UNet, gp: &PerturbationGenerator, images: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let ps = net.params().bind(&g, false);
    let pg = gp.params().bind(&g, false);
    let f_o = net.encode(&ps, g.constant(images.clone()))?;
    let f_p = gp.perturb(&pg, &f_o)?;
    let out = net.decode(&ps, &f_p)?;
    Ok((*out.value()).clone())
}

/// Test-time APPLE prediction: argmax of `D_s(f_o + G_p(f_o))`.
pub fn predict_apple(net: &UNet, gp: &PerturbationGenerator, images: &Tensor) -> Result<Vec<usize>> {
    Ok(apple_logits(net, gp, images)?.argmax_channels())
}

/// `f_p` (or `f_o` when `gp` is `None`) for every sample, in dataset order.
pub fn embeddings(net: &UNet, gp: Option<&PerturbationGenerator>, ds: &SegDataset) -> Result<Tensor> {
    let mut parts = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _, _) = ds.batch(chunk);
        let f_o = net.embed(&x)?;
        let f = match gp {
            None => f_o.tensor,
            Some(gp) => {
                let g = Graph::new();
                let pg = gp.params().bind(&g, false);
                let f_p = gp.perturb(&pg, &LatentVars::constant(&g, &f_o))?;
                (*f_p.tensor.value()).clone()
            }
        };
        parts.push(f);
    }
    Ok(Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub attribute: usize,
    pub dice: f64,
}

/// Per-sample Dice, subgroup utilities and fairness under both STD divisors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attribute_name: String,
    pub subgroup_labels: Vec<String>,
    pub requires_attribute: bool,
    pub per_sample: Vec<SampleScore>,
    pub utilities: UtilityVector,
    /// `None` when fewer than two subgroups are populated.
    pub fairness_sample: Option<FairnessReport>,
    pub fairness_population: Option<FairnessReport>,
}

impl EvalReport {
    /// Mean Dice over samples.
    pub fn mean_dice(&self) -> f64 {
        self.per_sample.iter().map(|s| s.dice).sum::<f64>() / self.per_sample.len() as f64
    }

    /// Mean of the populated subgroup utilities.
    pub fn macro_dice(&self) -> f64 {
        let v = self.utilities.populated();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn fairness(&self, ddof: Ddof) -> Option<&FairnessReport> {
        match ddof {
            Ddof::Sample => self.fairness_sample.as_ref(),
            Ddof::Population => self.fairness_population.as_ref(),
        }
    }

    /// `per_sample.csv` contents.
    pub fn per_sample_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "attribute", "dice"])?;
        for s in &self.per_sample {
            w.write_record([s.id.clone(), s.attribute.to_string(), format!("{:.17e}", s.dice)])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| FairsegError::Invalid(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Evaluate `predictor` on every sample of `ds`.
pub fn evaluate(predictor: &Predictor<'_>, ds: &SegDataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(FairsegError::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let (_, h, w) = ds.image_dims().expect("non-empty");
    let plane = h * w;
    let mut per_sample = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, masks, attrs) = ds.batch(chunk);
        let pred = predictor.predict(&x, &attrs)?;
        for (j, &i) in chunk.iter().enumerate() {
            let p: Vec<u8> = pred[j * plane..][..plane].iter().map(|&v| v as u8).collect();
            let y: Vec<u8> = masks[j * plane..][..plane].iter().map(|&v| v as u8).collect();
            let s = &ds.samples()[i];
            per_sample.push(SampleScore {
                id: s.id.clone(),
                attribute: s.attribute,
                dice: foreground_dice(&p, &y, ds.num_classes())?,
            });
        }
    }
    let scores: Vec<(f64, usize)> = per_sample.iter().map(|s| (s.dice, s.attribute)).collect();
    let utilities = subgroup_utilities(&scores, ds.num_subgroups())?;
    let populated = utilities.values.iter().flatten().count();
    let (fairness_sample, fairness_population) = if populated >= 2 {
        (
            Some(fairness(&utilities, Ddof::Sample)?),
            Some(fairness(&utilities, Ddof::Population)?),
        )
    } else {
        log::warn!("only {populated} populated subgroup(s); fairness metrics omitted");
        (None, None)
    };
    Ok(EvalReport {
        attribute_name: ds.attribute_name().to_string(),
        subgroup_labels: ds.subgroup_labels().to_vec(),
        requires_attribute: predictor.requires_attribute(),
        per_sample,
        utilities,
        fairness_sample,
        fairness_population,
    })
}
