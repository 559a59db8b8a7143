//! Dataset ingestion, PK batch sampling, augmentation and synthetic data.

mod augment;
mod market;
mod record;
mod sampler;
mod synthetic;

pub use augment::{
    all_finite, augment_train_image, flip_horizontal, preprocess_eval_image, to_unit_tensor,
    AugmentDraw, CropWindow, ImagePipeline, Normalization,
};
pub use market::{load_dataset_index, load_training_split, write_market_layout};
pub use record::{parse_market_name, DatasetIndex, ImageRecord, ImageSource, Split, JUNK_IDENTITY};
pub use sampler::{pk_sample, PkBatch};
pub use synthetic::{generate_synthetic_dataset, Difficulty, SyntheticConfig, SyntheticImage};
