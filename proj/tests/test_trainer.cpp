#include "support.hpp"

#include "zsad/synthetic.hpp"
#include "zsad/trainer.hpp"

#include <gtest/gtest.h>

#include <fstream>

namespace zsad {
namespace {

namespace fs = std::filesystem;

std::string read_bytes(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

class Trainer : public ::testing::Test {
protected:
    static void SetUpTestSuite()
    {
        dir_ = new testing::TempDir("zsad-trainer");
        SyntheticSpec spec;
        spec.normal_count = 8;
        spec.anomalous_count = 8;
        spec.seed = 3;
        manifest_ = new DatasetManifest(write_synthetic_dataset(dir_->path() / "syn", spec));
    }
    static void TearDownTestSuite()
    {
        delete manifest_;
        delete dir_;
    }

    static ModelConfig model_config()
    {
        ModelConfig c;
        c.adapter.k_layers = 2;
        c.sigma = 1.0;
        return c;
    }
    static PromptConfig prompt_config()
    {
        PromptConfig p;
        p.deep_layers = 1;
        return p;
    }

    AnomalyModel model{make_standin_backbone(StandinSpec::preset("tiny")), nullptr, model_config()};

    PreprocessSpec prep() const
    {
        PreprocessSpec p;
        p.size = 32;
        p.mean = model.backbone().vision.mean;
        p.stdev = model.backbone().vision.stdev;
        return p;
    }
    TrainConfig train_config(int max_steps) const
    {
        TrainConfig t;
        t.batch_size = 4;
        t.epochs = 1000;
        t.max_steps = max_steps;
        t.mask_size = 16;
        return t;
    }
    PromptBank fresh_bank(std::uint64_t seed = 111) const
    {
        return init_params(model.backbone().text, model.backbone().vision.out_dim, prompt_config(), seed);
    }
    std::vector<TrainSample> samples(const TrainConfig& t) const { return prepare_training_set(model, *manifest_, prep(), t); }

    static testing::TempDir* dir_;
    static DatasetManifest* manifest_;
};

testing::TempDir* Trainer::dir_ = nullptr;
DatasetManifest* Trainer::manifest_ = nullptr;

TEST_F(Trainer, DefaultsFollowReferenceProtocol)
{
    const TrainConfig t;
    EXPECT_DOUBLE_EQ(t.learning_rate, 0.001);
    EXPECT_DOUBLE_EQ(t.beta1, 0.6);
    EXPECT_DOUBLE_EQ(t.beta2, 0.999);
    EXPECT_EQ(t.batch_size, 8);
    EXPECT_EQ(t.seed, 111u);
}

TEST_F(Trainer, ZeroEpochsKeepsInitialisation)
{
    testing::TempDir out;
    TrainConfig t = train_config(0);
    t.epochs = 0;
    const PromptBank init = fresh_bank();
    const TrainResult r = train(model, init, samples(t), t, out.path());
    EXPECT_EQ(r.steps, 0);
    EXPECT_EQ(load_checkpoint(r.final_checkpoint).bank.checksum(), init.checksum());
    EXPECT_EQ(load_checkpoint(r.best_checkpoint).bank.checksum(), init.checksum());
}

TEST_F(Trainer, CheckpointRoundTripIsBitEqual)
{
    testing::TempDir out;
    const PromptBank b = fresh_bank(5);
    save_checkpoint(b, Json{{"lr", "0.001"}}, model.backbone().id, 7, out / "c.zck");
    const Checkpoint c = load_checkpoint(out / "c.zck", model.backbone().id);
    EXPECT_EQ(c.bank.checksum(), b.checksum());
    EXPECT_EQ(c.step, 7);
    EXPECT_EQ(c.backbone_id, model.backbone().id);
    EXPECT_EQ(c.code_version, std::string(kCodeVersion));
    EXPECT_EQ(c.config.at("lr"), "0.001");
}

TEST_F(Trainer, MismatchedCheckpointRejectedNamingField)
{
    testing::TempDir out;
    save_checkpoint(fresh_bank(), Json::object(), model.backbone().id, 0, out / "c.zck");
    try {
        load_checkpoint(out / "c.zck", "standin-small");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("backbone"), std::string::npos);
    }
    PromptConfig other = prompt_config();
    other.prompt_tokens = 8;
    try {
        load_checkpoint(out / "c.zck", {}, &other);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("prompt_tokens"), std::string::npos);
    }
}

TEST_F(Trainer, TruncatedCheckpointIsIntegrityError)
{
    testing::TempDir out;
    save_checkpoint(fresh_bank(), Json::object(), model.backbone().id, 0, out / "c.zck");
    fs::resize_file(out / "c.zck", fs::file_size(out / "c.zck") - 9);
    EXPECT_THROW(load_checkpoint(out / "c.zck"), IntegrityError);
}

TEST_F(Trainer, AnomalyWithoutMaskRejected)
{
    DatasetManifest m = *manifest_;
    for (auto& e : m.entries) {
        if (e.label == 1) {
            e.mask_path.reset();
            break;
        }
    }
    EXPECT_THROW(prepare_training_set(model, m, prep(), train_config(1)), DataError);
    TrainConfig t = train_config(1);
    t.split = "validation";
    EXPECT_THROW(prepare_training_set(model, *manifest_, prep(), t), DataError);
}

TEST_F(Trainer, TrainingSetMasksAtRequestedResolution)
{
    const auto s = samples(train_config(1));
    ASSERT_EQ(s.size(), 16u);
    for (const auto& x : s) {
        EXPECT_EQ(x.targets.mask.rows(), 16);
        EXPECT_EQ(x.targets.mask.sum() > 0.0, x.targets.image_label == 1);
    }
}

TEST_F(Trainer, LossGradientMatchesFiniteDifferences)
{
    const auto s = samples(train_config(1));
    const PromptBank bank = fresh_bank(9);
    const TrainSample& x = s.back();
    const BankVars vars = bind(bank, true);
    ag::backward(model.loss(vars, bank, x.features, x.targets));
    const auto leaves = vars.all();

    PromptBank probe = bank;
    auto params = probe.named_parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        Matrix* p = params[k].second;
        const Matrix base = *p;
        auto f = [&](const Matrix& m) {
            *p = m;
            const double v = model.loss(bind(probe, false), probe, x.features, x.targets).scalar();
            *p = base;
            return v;
        };
        const Matrix analytic = leaves[k].grad().size() ? leaves[k].grad() : Matrix(Matrix::Zero(p->rows(), p->cols()));
        EXPECT_LT(testing::gradient_error(f, base, analytic, 1e-6, 1e-6), 1e-3) << params[k].first;
    }
}

TEST_F(Trainer, AdamFirstStepMovesByLearningRate)
{
    PromptBank b = fresh_bank();
    const PromptBank before = b;
    TrainConfig t;
    Adam adam(t);
    std::vector<Matrix> grads;
    for (const auto& [n, p] : b.named_parameters()) {
        grads.push_back(Matrix::Constant(p->rows(), p->cols(), -0.5));
    }
    adam.step(b, grads);
    // Bias-corrected first step is lr * g / (|g| + eps).
    const double want = t.learning_rate * 0.5 / (0.5 + t.adam_eps);
    EXPECT_NEAR(b.normal_tokens(0, 0) - before.normal_tokens(0, 0), want, 1e-15);
    EXPECT_NEAR(b.context_b(0, 3) - before.context_b(0, 3), want, 1e-15);
}

TEST_F(Trainer, LossDecreasesAndTowersStayFrozen)
{
    testing::TempDir out;
    const TrainConfig t = train_config(50);
    const std::uint64_t frozen = model.backbone().checksum();
    std::vector<StepLog> logs;
    const TrainResult r = train(model, fresh_bank(), samples(t), t, out.path(), Json::object(),
                                [&](const StepLog& s) { logs.push_back(s); });
    ASSERT_EQ(r.steps, 50);
    ASSERT_EQ(logs.size(), 50u);
    auto window = [&](int end) {
        double s = 0.0;
        for (int i = end - 10; i < end; ++i) {
            s += r.step_losses[static_cast<std::size_t>(i)];
        }
        return s / 10.0;
    };
    // Single batches are noisy; the moving average must fall overall.
    EXPECT_LT(window(50), 0.5 * window(10));
    EXPECT_LT((window(30) + window(40) + window(50)) / 3.0, (window(10) + window(20)) / 2.0);
    EXPECT_EQ(model.backbone().checksum(), frozen);
    EXPECT_TRUE(fs::exists(out / "train_log.jsonl"));
    EXPECT_TRUE(fs::exists(r.best_checkpoint));
}

TEST_F(Trainer, SeededRunsAreBitIdentical)
{
    testing::TempDir a, b;
    const TrainConfig t = train_config(6);
    const auto s = samples(t);
    const TrainResult ra = train(model, fresh_bank(), s, t, a.path());
    const TrainResult rb = train(model, fresh_bank(), s, t, b.path());
    EXPECT_EQ(read_bytes(ra.final_checkpoint), read_bytes(rb.final_checkpoint));
    EXPECT_EQ(read_bytes(a / "train_log.jsonl"), read_bytes(b / "train_log.jsonl"));
}

TEST_F(Trainer, InvalidConfigurationRejected)
{
    testing::TempDir out;
    TrainConfig t = train_config(1);
    t.batch_size = 0;
    EXPECT_THROW(train(model, fresh_bank(), samples(train_config(1)), t, out.path()), ConfigError);
}

}  // namespace
}  // namespace zsad
