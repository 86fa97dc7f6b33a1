//! Sweep orchestration and result files.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{parse_config, parse_config_str, CampaignSpec, ConfigError, CtrSettings, ExperimentKind, OutputFormat};
pub use output::{emit_results, figure_table, load_results, write_figure_table, FigureCell, OutputError};
pub use runner::{derive_seed, run_campaign, run_campaign_detailed, AbftSummary, Baseline, CampaignError, CampaignOutcome, RunRecord};
