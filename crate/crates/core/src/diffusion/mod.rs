//! Desk-scale conditional diffusion: schedules, a conv denoiser, guided
//! sampling, an optional latent autoencoder and multi-concept fine-tuning.

pub mod autoencoder;
pub mod concept;
pub mod corpus;
pub mod denoiser;
pub mod finetune;
pub mod sample;
pub mod schedule;
pub mod train;

pub use autoencoder::{train_autoencoder, AutoencoderConfig, AutoencoderPair, AutoencoderTrainConfig, LatentMode};
pub use corpus::{build_class_corpus, Corpus, CorpusEntry, CorpusItem, CorpusManifest};
pub use concept::{validate_identifier, Condition, ConceptBook, ConceptEntry, ConditionTag, TokenKind, IDENTIFIER_LEN, token_group};
pub use finetune::{finetune_multiconcept, generate_prior, Concept, FinetuneConfig, FinetuneResult, NoiseAudit};
pub use denoiser::{denoiser_predict, timestep_embedding, Denoiser, DenoiserConfig};
pub use sample::{cfg_combine, cfg_sample, cfg_sample_batch, guided_eps, respaced_timesteps, SampleOptions};
pub use schedule::{add_noise, make_schedule, NoiseSchedule, ScheduleKind};
pub use train::{denoising_loss, train_denoiser, DenoiserTrainConfig, LogRow, TrainLog, TrainSample};
