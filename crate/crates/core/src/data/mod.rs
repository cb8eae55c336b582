//! Synthetic data, netpbm I/O, normalization and augmentation.

pub mod augment;
pub mod netpbm;
pub mod split;
pub mod synth;
pub mod transforms;

pub use augment::{augment, AugmentConfig};
pub use split::{load_dataset_dir, make_split, scan_dataset_dir, synth_set, tagged_seeds, to_batch, DifficultyMix, NamedPair, SeedList, Split};
pub use netpbm::{load_image_ppm, load_mask_pgm, save_image_ppm, save_mask_pgm, save_prob_pgm};
pub use synth::{canonical_corpus, check_size, corpus_digest, synth_sample, Difficulty, SegmentationSample};
pub use transforms::{denormalize_imagenet, hflip, normalize_imagenet, rot90, vflip};
