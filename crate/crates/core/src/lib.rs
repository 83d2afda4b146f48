//! Generative adversarial transformers on latent images: networks, losses,
//! training and analysis on a small reverse-mode autodiff engine.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod generator;
pub mod graph;
pub mod mng;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod probe;
pub mod scalar;
pub mod trainer;
