#include "casemix/glm.hpp"
#include "casemix/meta.hpp"
#include "casemix/simlab.hpp"
#include "casemix/transport.hpp"
#include "casemix/variance.hpp"

#include <benchmark/benchmark.h>

using namespace casemix;

namespace {

const SettingConfig& setting1() {
    static const auto cfg = preset_setting("1");
    return cfg;
}

const IpdDataset& dataset1() {
    static const auto ds = generate_setting(setting1(), 42);
    return ds;
}

void BM_GenerateSetting(benchmark::State& state) {
    std::size_t rep = 0;
    for (auto _ : state) benchmark::DoNotOptimize(generate_setting(setting1(), 42, rep++));
}
BENCHMARK(BM_GenerateSetting);

void BM_OutcomeFit(benchmark::State& state) {
    const auto& ds = dataset1();
    const auto compiled = CompiledFormula(ModelFormula::parse("y ~ 1 + treat + L + L^2 + treat:L"), ds.schema());
    const auto rows = ds.rows_of(0);
    const auto X = compiled.design(ds, rows);
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) y(static_cast<Eigen::Index>(i)) = ds.outcome(rows[i]);
    for (auto _ : state) benchmark::DoNotOptimize(fit_logistic(X, y));
}
BENCHMARK(BM_OutcomeFit);

void BM_StandardizeAll(benchmark::State& state, const char* analysis) {
    const auto spec = make_analysis(setting1(), analysis).spec;
    for (auto _ : state) benchmark::DoNotOptimize(standardize_all(dataset1(), spec));
}
BENCHMARK_CAPTURE(BM_StandardizeAll, OCR1, "OCR1");
BENCHMARK_CAPTURE(BM_StandardizeAll, IPW1, "IPW1");

void BM_Sandwich(benchmark::State& state, const char* analysis) {
    const auto spec = make_analysis(setting1(), analysis).spec;
    for (auto _ : state) benchmark::DoNotOptimize(sandwich_cov(dataset1(), spec, Measure::OR));
}
BENCHMARK_CAPTURE(BM_Sandwich, OCR1, "OCR1");
BENCHMARK_CAPTURE(BM_Sandwich, IPW1, "IPW1");

void BM_Bootstrap(benchmark::State& state) {
    const auto spec = make_analysis(setting1(), "IPW1").spec;
    BootstrapOptions bo;
    bo.replicates = static_cast<std::size_t>(state.range(0));
    bo.seed = 7;
    for (auto _ : state) benchmark::DoNotOptimize(bootstrap_cov(dataset1(), spec, Measure::OR, bo));
}
BENCHMARK(BM_Bootstrap)->Arg(20)->Unit(benchmark::kMillisecond);

void BM_PoolRow(benchmark::State& state) {
    std::vector<MetaInput> in;
    for (int i = 0; i < state.range(0); ++i) in.push_back({std::to_string(i), 0.1 * (i % 7), 0.2 + 0.01 * (i % 5)});
    for (auto _ : state) benchmark::DoNotOptimize(pool_row(in));
}
BENCHMARK(BM_PoolRow)->Arg(2)->Arg(50);

}  // namespace

BENCHMARK_MAIN();
