// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>
#include <iostream>

#include "moesched/cli.hpp"

int main(int argc, char** argv) {
  using namespace moesched;
  CLI::App app{"MoE communication schedule simulator and cost model"};
  app.require_subcommand(1);
  CommandOptions opts;

  auto add_out = [&](CLI::App* cmd) { cmd->add_option("--out", opts.out, "Write the CSV here instead of stdout"); };
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", opts.config, "Run config (key = value)")->required();
  };

  auto* fit = app.add_subcommand("fit", "Fit alpha-beta parameters from timing samples");
  fit->add_option("input", opts.input, "collective,group,elements,seconds CSV")->required();
  add_out(fit);

  auto* predict = app.add_subcommand("predict", "Price the schedules and pick S1 or S2");
  add_config(predict);
  predict->add_option("--profile", opts.profile, "Fitted profile CSV")->required();
  predict->add_flag("--alg1-literal", opts.literal_selector,
                    "Price S2 with the overlap on the full dispatch and no MP gather");
  add_out(predict);

  auto* simulate = app.add_subcommand("simulate", "Run schedules on simulated ranks and check them");
  add_config(simulate);
  simulate->add_option("--schedule", opts.schedule, "baseline, s1, s2 or all")
      ->check(CLI::IsMember({"baseline", "s1", "s2", "all"}));
  simulate->add_option("--seed", opts.seed, "Seed (falls back to PARM_SEED, then the config)");
  simulate->add_flag("--corrupt-weights", opts.corrupt_weights)->group("");
  add_out(simulate);

  auto* verify = app.add_subcommand("verify", "Check the schedule inequalities on the timing model");
  add_config(verify);
  verify->add_option("--sizes", opts.sizes, "Sizes, e.g. 2^10..2^24 or 1024,4096");
  add_out(verify);

  auto* sweep = app.add_subcommand("sweep", "Price every point of a configuration grid");
  sweep->add_option("--grid", opts.grid, "Grid file (defaults to the built-in grid)");
  sweep->add_option("--profile", opts.profile, "Fitted profile CSV")->required();
  sweep->add_flag("--alg1-literal", opts.literal_selector,
                  "Price S2 with the overlap on the full dispatch and no MP gather");
  add_out(sweep);

  auto* measure = app.add_subcommand("measure", "Emit fit samples from the timing model");
  add_config(measure);
  measure->add_option("--sizes", opts.sizes, "Sizes, e.g. 2^18..2^33");
  add_out(measure);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInputError;
  }

  if (*fit) return cmd_fit(opts, std::cout, std::cerr);
  if (*predict) return cmd_predict(opts, std::cout, std::cerr);
  if (*simulate) return cmd_simulate(opts, std::cout, std::cerr);
  if (*verify) return cmd_verify(opts, std::cout, std::cerr);
  if (*sweep) return cmd_sweep(opts, std::cout, std::cerr);
  return cmd_measure(opts, std::cout, std::cerr);
}
