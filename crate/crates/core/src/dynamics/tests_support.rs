use super::{
    ControllerKind, EPISODE_SCHEMA_VERSION, Episode, EpisodeMeta, HumanModel, PlantParams, Record, TrajectoryKind,
    TrajectorySpec,
};

/// Planar episode at rest whose human force follows the given sequence.
pub(crate) fn episode_with_forces(forces: &[Vec<f64>]) -> Episode {
    Episode {
        meta: EpisodeMeta {
            schema_version: EPISODE_SCHEMA_VERSION,
            plant: PlantParams::planar_default(),
            trajectory: TrajectorySpec::new(TrajectoryKind::Linear, 2, 10.0),
            obstacle: None,
            human: HumanModel::default_for(2),
            model_id: None,
            seed: 0,
        },
        records: forces
            .iter()
            .enumerate()
            .map(|(i, f)| Record {
                t: i as f64 * 0.008,
                x: vec![0.0, 0.0],
                v: vec![0.0, 0.0],
                u_h: f.clone(),
                x_ref_r: vec![0.0, 0.0],
                x_ref_h_true: vec![0.0, 0.0],
                u_r: vec![0.0, 0.0],
                tag: ControllerKind::ManualGuidance,
            })
            .collect(),
    }
}
