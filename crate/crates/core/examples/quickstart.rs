use uniam::data::{generate, ScenarioSpec};
use uniam::eval::run_pipeline;
use uniam::trainer::TrainConfig;

fn main() -> uniam::Result<()> {
    let dataset = generate(&ScenarioSpec::default())?;
    let out = run_pipeline(&dataset, &TrainConfig::default())?;
    println!(
        "beta {:.4}  H-score {:.4}  (common {:.4}, unknown {:.4})",
        out.beta, out.report.h_score, out.report.common_accuracy, out.report.unknown_accuracy
    );
    println!("entropy baseline H-score {:.4}", out.baseline.report.h_score);
    Ok(())
}
