#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pdiff/corpus.hpp"
#include "pdiff/tasks.hpp"

using namespace pdiff;

namespace {

SyntheticDataset default_blobs(std::uint64_t seed = 7) {
    return make_dataset(DatasetKind::GaussianBlobs, 400, 400, 4, {16}, seed);
}

}  // namespace

TEST_CASE("dataset generation is deterministic") {
    auto a = make_dataset(DatasetKind::GaussianBlobs, 400, 400, 4, {16}, 7);
    auto b = make_dataset(DatasetKind::GaussianBlobs, 400, 400, 4, {16}, 7);
    CHECK(a.train_x == b.train_x);
    CHECK(a.train_y == b.train_y);
    CHECK(a.val_x == b.val_x);
    CHECK(a.val_y == b.val_y);

    auto c = make_dataset(DatasetKind::TinyImages, 64, 64, 4, {3, 8, 8}, 7);
    auto d = make_dataset(DatasetKind::TinyImages, 64, 64, 4, {3, 8, 8}, 7);
    CHECK(c.train_x == d.train_x);
    CHECK(c.val_y == d.val_y);
}

TEST_CASE("class counts are balanced within one") {
    auto ds = make_dataset(DatasetKind::GaussianBlobs, 401, 203, 4, {8}, 3);
    for (bool train : {true, false}) {
        const auto& ys = train ? ds.train_y : ds.val_y;
        std::vector<int> counts(4, 0);
        for (int y : ys) counts[static_cast<std::size_t>(y)]++;
        const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
        CHECK(*hi - *lo <= 1);
    }
}

TEST_CASE("single-class dataset is trivially classified") {
    auto ds = make_dataset(DatasetKind::GaussianBlobs, 40, 40, 1, {8}, 5);
    for (int y : ds.train_y) CHECK(y == 0);
    Classifier model(ModelSpec::mlp_mini_s({8, 4, 1}), 0);
    CHECK(evaluate(model, ds).accuracy == 1.0);
}

TEST_CASE("make_dataset rejects invalid dims") {
    CHECK_THROWS_AS(make_dataset(DatasetKind::GaussianBlobs, 10, 10, 2, {}, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(make_dataset(DatasetKind::TinyImages, 10, 10, 2, {16}, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(make_dataset(DatasetKind::GaussianBlobs, 1, 10, 2, {4}, 0),
                    std::invalid_argument);
}

TEST_CASE("model spec parameter counts") {
    CHECK(ModelSpec::mlp_mini_s({16, 32, 16, 4}).param_count() == 1140);
    ModelSpec conv = ModelSpec::convnet_mini_s(3, 8, 4);
    // bn layer with 8 channels contributes 8 weights + 8 biases
    std::size_t bn_params = 0;
    for (const auto& p : conv.layer_table()) {
        if (p.layer == "bn1") bn_params += numel(p.shape);
    }
    CHECK(bn_params == 16);
    Classifier model(conv, 1);
    CHECK(model.param_count() == conv.param_count());
}

TEST_CASE("same seed builds identical initial parameters") {
    Classifier a(ModelSpec::mlp_mini_s({16, 32, 16, 4}), 9);
    Classifier b(ModelSpec::mlp_mini_s({16, 32, 16, 4}), 9);
    auto pa = flatten(a.named_params(), ParamSelector::full());
    auto pb = flatten(b.named_params(), ParamSelector::full());
    CHECK(pa.values == pb.values);

    Classifier c(ModelSpec::mlp_mini_s({16, 32, 16, 4}), 10);
    auto pc = flatten(c.named_params(), ParamSelector::full());
    CHECK(pa.values != pc.values);
}

TEST_CASE("biases start at zero and batch-norm at identity") {
    Classifier model(ModelSpec::convnet_mini_s(3, 8, 4), 2);
    for (auto& p : model.named_params()) {
        if (p.name.ends_with(".bias")) {
            for (double v : p.tensor.values()) CHECK(v == 0.0);
        }
        if (p.name == "bn1.weight") {
            for (double v : p.tensor.values()) CHECK(v == 1.0);
        }
    }
}

TEST_CASE("constant classifier on a balanced 4-class set scores 0.25") {
    auto ds = default_blobs();
    Classifier model(ModelSpec::mlp_mini_s({16, 8, 4}), 0);
    auto params = model.named_params();
    auto sel = ParamSelector::full();
    unflatten(std::vector<double>(sel.dimension(params), 0.0), params, sel);
    auto res = evaluate(model, ds);
    CHECK(res.accuracy == 0.25);  // all logits tie; argmax picks class 0
    for (int p : res.predictions) CHECK(p == 0);
}

TEST_CASE("zero epochs leaves the model at initialization") {
    auto ds = default_blobs();
    Classifier model(ModelSpec::mlp_mini_s({16, 32, 16, 4}), 4);
    auto before = flatten(model.named_params(), ParamSelector::full());
    TrainConfig cfg;
    cfg.epochs = 0;
    auto hist = train_to_convergence(model, ds, cfg);
    CHECK(hist.val_accuracy.empty());
    auto after = flatten(model.named_params(), ParamSelector::full());
    CHECK(before.values == after.values);
}

TEST_CASE("training on separable blobs converges above 0.9") {
    auto ds = default_blobs();
    Classifier model(ModelSpec::mlp_mini_s({16, 32, 16, 4}), 4);
    TrainConfig cfg;
    cfg.seed = 4;
    auto hist = train_to_convergence(model, ds, cfg);
    REQUIRE(hist.val_accuracy.size() == cfg.epochs);
    CHECK(hist.val_accuracy.back() > 0.9);
}

TEST_CASE("one epoch scores strictly below twenty on the same seeds") {
    double short_sum = 0.0, long_sum = 0.0;
    for (std::uint64_t seed : {21, 22, 23}) {
        auto ds = default_blobs(seed);
        Classifier fast(ModelSpec::mlp_mini_s({16, 32, 16, 4}), seed);
        Classifier slow(ModelSpec::mlp_mini_s({16, 32, 16, 4}), seed);
        TrainConfig one;
        one.epochs = 1;
        one.seed = seed;
        TrainConfig twenty;
        twenty.epochs = 20;
        twenty.seed = seed;
        short_sum += train_to_convergence(fast, ds, one).val_accuracy.back();
        long_sum += train_to_convergence(slow, ds, twenty).val_accuracy.back();
    }
    CHECK(short_sum / 3.0 < long_sum / 3.0);
}

TEST_CASE("harvest produces K rows of the right width") {
    auto ds = default_blobs();
    Classifier model(ModelSpec::mlp_mini_s({16, 32, 16, 4}), 4);
    TrainConfig cfg;
    cfg.seed = 4;
    train_to_convergence(model, ds, cfg);
    cfg.finetune_steps = 300;
    auto harvest = finetune_and_harvest(model, ds, cfg, ParamSelector::full(), false);
    CHECK(harvest.corpus.rows() == 300);
    CHECK(harvest.corpus.cols() == 1140);
}

TEST_CASE("bn selector of convnet-mini-s harvests d=16 vectors") {
    auto ds = make_dataset(DatasetKind::TinyImages, 128, 128, 4, {3, 8, 8}, 6, 0.8);
    Classifier model(ModelSpec::convnet_mini_s(3, 8, 4), 6);
    TrainConfig cfg;
    cfg.seed = 6;
    cfg.epochs = 2;
    train_to_convergence(model, ds, cfg);
    cfg.finetune_steps = 12;
    auto sel = ParamSelector::subset({{"bn1", "weight"}, {"bn1", "bias"}});
    auto harvest = finetune_and_harvest(model, ds, cfg, sel, false);
    CHECK(harvest.corpus.rows() == 12);
    CHECK(harvest.corpus.cols() == 16);
}

TEST_CASE("partial-selector harvest leaves non-selected parameters bit-identical") {
    auto ds = default_blobs();
    Classifier model(ModelSpec::mlp_mini_s({16, 32, 16, 4}), 4);
    TrainConfig cfg;
    cfg.seed = 4;
    cfg.epochs = 3;
    train_to_convergence(model, ds, cfg);

    auto frozen_sel = ParamSelector::subset({{"linear1", "weight"}, {"linear1", "bias"},
                                             {"linear2", "weight"}, {"linear2", "bias"}});
    auto params = model.named_params();
    auto frozen_before = flatten(params, frozen_sel);

    cfg.finetune_steps = 25;
    auto tuned_sel = ParamSelector::subset({{"linear3", "weight"}, {"linear3", "bias"}});
    auto harvest = finetune_and_harvest(model, ds, cfg, tuned_sel, false);
    CHECK(harvest.corpus.cols() == 16 * 4 + 4);

    auto frozen_after = flatten(model.named_params(), frozen_sel);
    CHECK(frozen_before.values == frozen_after.values);
}

TEST_CASE("corpus row k replays the accuracy logged at step k") {
    auto ds = default_blobs();
    Classifier model(ModelSpec::mlp_mini_s({16, 32, 16, 4}), 4);
    TrainConfig cfg;
    cfg.seed = 4;
    cfg.epochs = 8;
    train_to_convergence(model, ds, cfg);
    cfg.finetune_steps = 20;
    auto harvest = finetune_and_harvest(model, ds, cfg, ParamSelector::full(), true);
    REQUIRE(harvest.step_accuracy.size() == 20);

    auto params = model.named_params();
    for (std::size_t k : {0ul, 9ul, 19ul}) {
        unflatten(harvest.corpus.row(k), params, ParamSelector::full());
        CHECK(evaluate(model, ds).accuracy == harvest.step_accuracy[k]);
    }
    // the final row is the final model state
    auto final_now = flatten(params, ParamSelector::full());
    CHECK(final_now.values == harvest.corpus.row(19));
}

TEST_CASE("same seeds give identical corpus bytes") {
    auto run = [] {
        auto ds = default_blobs(31);
        Classifier model(ModelSpec::mlp_mini_s({16, 32, 16, 4}), 31);
        TrainConfig cfg;
        cfg.seed = 31;
        cfg.epochs = 3;
        train_to_convergence(model, ds, cfg);
        cfg.finetune_steps = 10;
        return finetune_and_harvest(model, ds, cfg, ParamSelector::full(), false).corpus.raw();
    };
    CHECK(run() == run());
}

TEST_CASE("harvest rejects an empty or unknown selector") {
    auto ds = default_blobs();
    Classifier model(ModelSpec::mlp_mini_s({16, 32, 16, 4}), 4);
    TrainConfig cfg;
    CHECK_THROWS_AS(finetune_and_harvest(model, ds, cfg, ParamSelector::subset({}), false),
                    std::invalid_argument);
    CHECK_THROWS_AS(
        finetune_and_harvest(model, ds, cfg, ParamSelector::subset({{"missing", "weight"}}), false),
        std::invalid_argument);
}
