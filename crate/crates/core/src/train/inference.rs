use ndarray::{Array1, ArrayView3};

use crate::data::{DatasetIndex, ImagePipeline, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EmbeddingSet, EvalReport, QueryMode};
use crate::model::{Backbone, DeepPerson, Descriptor};

/// Retrieval descriptor of one preprocessed image.
pub fn embed_image<B: Backbone>(
    model: &DeepPerson<B>,
    image: ArrayView3<f64>,
    which: Descriptor,
) -> Result<Array1<f64>> {
    match which {
        // f_m needs no head computation.
        Descriptor::Pooled => Ok(model.backbone_forward(image)?.global_average_pool()),
        Descriptor::Fused => {
            let b = model.config().branches;
            if !(b.part && b.global) {
                return Err(Error::BranchDisabled("part+global (f_c)"));
            }
            Ok(model.forward(image)?.descriptor(which)?.clone())
        }
    }
}

/// Embeds the given records in order.
pub fn embed_records<B: Backbone>(
    model: &DeepPerson<B>,
    index: &DatasetIndex,
    records: &[usize],
    pipeline: &ImagePipeline,
    which: Descriptor,
) -> Result<EmbeddingSet> {
    let mut rows = Vec::with_capacity(records.len());
    let (mut ids, mut cams) = (
        Vec::with_capacity(records.len()),
        Vec::with_capacity(records.len()),
    );
    for &i in records {
        let r = index.record(i);
        let image = pipeline.preprocess(&*r.load()?);
        rows.push(embed_image(model, image.view(), which)?);
        ids.push(r.identity);
        cams.push(r.camera);
    }
    if rows.is_empty() {
        let dim = match which {
            Descriptor::Pooled => model.config().channels,
            Descriptor::Fused => model.config().fused_dim(),
        };
        return EmbeddingSet::new(ndarray::Array2::zeros((0, dim)), ids, cams);
    }
    EmbeddingSet::from_rows(&rows, ids, cams)
}

/// Embeds the query and gallery splits and scores them.
pub fn evaluate_model<B: Backbone>(
    model: &DeepPerson<B>,
    index: &DatasetIndex,
    pipeline: &ImagePipeline,
    which: Descriptor,
    mode: QueryMode,
    k_max: usize,
) -> Result<EvalReport> {
    let query = embed_records(
        model,
        index,
        &index.split_indices(Split::Query),
        pipeline,
        which,
    )?;
    let gallery = embed_records(
        model,
        index,
        &index.split_indices(Split::Gallery),
        pipeline,
        which,
    )?;
    evaluate(&query, &gallery, mode, k_max)
}
