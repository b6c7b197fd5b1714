use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qmoe_cli::commands::{cmd_eval, cmd_gen, cmd_quantize, cmd_sim, EvalArgs, GenArgs, QuantizeArgs, SimArgs};

/// Post-training quantization and accelerator modelling for small MoE vision transformers.
#[derive(Parser)]
#[command(name = "qmoe", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a float model with calibration and evaluation inputs.
    Gen(GenArgs),
    /// Calibrate and quantize a float model.
    Quantize(QuantizeArgs),
    /// Compare a quantized model with its float source; exits 2 if a check fails.
    Eval(EvalArgs),
    /// Sweep the accelerator model over PE counts, linear units and bandwidths.
    Sim(SimArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a).map(|_| true),
        Cmd::Quantize(a) => cmd_quantize(a).map(|_| true),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sim(a) => cmd_sim(a).map(|_| true),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
