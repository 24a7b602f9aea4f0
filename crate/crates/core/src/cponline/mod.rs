//! Online prediction of elasto-viscoplastic response with a trained network.

pub mod crystal;

pub use crystal::{
    cp_stress_update, interaction_class, interaction_classes, interaction_matrix, polar_rotation, slip_rate,
    CpParams, CpUpdate, CrystalModel, InteractionClass, MaterialState, Mat9, FCC_SLIP, SLIP_SYSTEMS,
};
pub mod network;

pub use network::{
    hill_mandel_residual, run_program, tangent_to_voigt, Control, Coupling, Ensemble, EnsembleState, History,
    HistoryRow, LoadProgram, LoadSegment, StepReport, TextureSnapshot, Until,
};
pub mod unitcell;

pub use unitcell::{export_analogous_unit_cell, AnalogousCell};
