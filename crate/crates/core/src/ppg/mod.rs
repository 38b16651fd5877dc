//! Guided sampling: noise schedule, seeded codebooks, guidance projections
//! and the sampling loop over a pluggable denoiser.

pub mod codebook;
pub mod denoiser;
pub mod pca;
pub mod sampler;
pub mod schedule;
pub mod spectral;

pub use codebook::{make_codebook, stream_noise, stream_rng, NoiseCodebook, NoiseStream, DEFAULT_CODEBOOK_SIZE};
pub use denoiser::{Conditioning, Denoiser, StepInfo, ToyDenoiser, ToyPosterior};
pub use pca::{principal_project, symmetric_eigen, PcaOrientation, PrincipalProjection};
pub use sampler::{
    argmax_alignment, guidance_residual, ppg_step, predict_x0, sample, select_noise, GuidanceMode, SampleOutput,
    SamplerContext, StepOutcome, X0Prediction,
};
pub use schedule::{ddim_sigma, NoiseSchedule, ScheduleConfig, StepCoefficients};
pub use spectral::{low_frequency_project, radial_frequency};
