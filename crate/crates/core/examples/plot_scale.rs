//! Parameter counts over a width × depth grid, and an SVG chart of them.
//!
//! cargo run --example plot_scale -- [out.svg]

use attnas::attention::CandidateOp;
use attnas::plot::{render_svg, Series};
use attnas::scale::scale_sweep;
use attnas::space::MacroConfig;
use attnas::train::TrainConfig;

fn main() -> attnas::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "scale.svg".into());
    let channels = [8, 16, 24, 32];
    let stages = [2, 3, 4];
    let pattern = [CandidateOp::LocalSa { window: 3, heads: 4 }, CandidateOp::NonLocalSa];
    let rows = scale_sweep(&MacroConfig::desk(), &pattern, &channels, &stages, &TrainConfig::desk(), None)?;
    println!("{}", attnas::persist::csv_string(&rows)?);

    let series: Vec<Series> = stages
        .iter()
        .map(|&s| Series {
            label: format!("{s} stages"),
            points: rows
                .iter()
                .filter(|r| r.stages == s)
                .map(|r| (r.channels as f64, r.params as f64))
                .collect(),
        })
        .collect();
    let svg = render_svg("weights vs. stem width", "channels", "weights", &series)?;
    std::fs::write(&path, svg).map_err(|e| attnas::Error::io(&path, e))?;
    println!("wrote {path}");
    Ok(())
}
