use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polyrigid::liealg::Twist;
use polyrigid::phantom::{make_case, random_case_twists, CaseSettings, OrbitGeometry, Preset};
use polyrigid::registration::objective;
use polyrigid::similarity::PatchSpec;

const SIZE: usize = 32;

fn unit(rng: &mut impl Rng) -> nalgebra::Vector3<f64> {
    loop {
        let v = nalgebra::Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        if (1e-3..=1.0).contains(&v.norm()) {
            return v.normalize();
        }
    }
}

#[test]
fn truth_beats_perturbed_twists() {
    for (p, preset) in Preset::ALL.into_iter().enumerate() {
        let spec = preset.spec(SIZE, Preset::FIELD_OF_VIEW / SIZE as f64, 40 + p as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(p as u64);
        let (_, labels) = polyrigid::phantom::make_phantom(&spec).unwrap();
        let ids = labels.structure_ids();
        assert!(ids.iter().all(|&id| labels.count(id) > 0));
        let truth = random_case_twists(&mut rng, &ids, preset.anchor_id(), 0.1, 5.0);
        let settings = CaseSettings {
            orbit: OrbitGeometry {
                detector_pixels: 64,
                pixel_spacing: 4.0,
                ..OrbitGeometry::default()
            },
            ..CaseSettings::new(2, 60.0)
        };
        let case = make_case(&spec, &truth, &settings).unwrap();
        let problem = case.problem(case.weight_mode, PatchSpec::default());
        let best = objective(&problem, &truth).unwrap();
        for _ in 0..100 {
            let mut twists = truth.clone();
            let k = rng.gen_range(0..ids.len());
            let row = &mut twists.rows_mut()[k];
            let d = Twist::new(
                unit(&mut rng) * rng.gen_range(0.05..0.15),
                unit(&mut rng) * rng.gen_range(5.0..10.0),
            );
            *row = Twist::from_array(std::array::from_fn(|i| row.to_array()[i] + d.to_array()[i]));
            let score = objective(&problem, &twists).unwrap();
            assert!(score <= best, "{preset}: {score} > {best} at structure {}", ids[k]);
        }
    }
}
