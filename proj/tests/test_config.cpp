#include <gtest/gtest.h>

#include "bens/config.hpp"

using namespace bens;

namespace {

std::string error_of(const std::string& text) {
    try {
        parse_config_text(text, "x.cfg");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST(Config, RoundTrip) {
    const std::string text =
        "# desk run\n"
        "dataset = cifar10\n"
        "base = resnet-8-16\n"
        "n_per_class = 10, 50\n"
        "members = 4,8\n"
        "designs = ensemble,wide\n"
        "seeds = 3\n"
        "epochs = 12   # short\n"
        "lr0 = 0.05\n"
        "aug = ++\n"
        "sensitivity_cap = none\n"
        "data_root = /data/cifar\n";
    auto c = parse_config_text(text);
    EXPECT_EQ(c.dataset, "cifar10");
    EXPECT_EQ(arch_name(c.base), "resnet-8-16");
    EXPECT_EQ(c.n_per_class, (std::vector<std::size_t>{10, 50}));
    EXPECT_EQ(c.members, (std::vector<std::size_t>{4, 8}));
    EXPECT_EQ(c.designs, (std::vector<Design>{Design::ensemble, Design::wide}));
    EXPECT_EQ(c.epochs, 12);
    EXPECT_FALSE(c.sensitivity_cap.has_value());
    EXPECT_EQ(c.aug, AugLevel::plusplus);
    const auto once = serialize(c);
    auto again = parse_config_text(once);
    EXPECT_EQ(serialize(again), once);
    EXPECT_EQ(again.lr0, 0.05);
}

TEST(Config, DefaultsAndDatasetBinding) {
    auto c = parse_config_text("dataset = cifar100\nbase = densenet-40-12\n");
    EXPECT_EQ(c.base.num_classes, 100);
    EXPECT_EQ(c.seeds.size(), 5u);
    EXPECT_EQ(c.sensitivity_cap, kSensitivityCap);
    auto s = parse_config_text("dataset = synthetic\nbase = resnet-8-4\nsynthetic_classes = 3\nsynthetic_side = 8\n");
    EXPECT_EQ(s.base.num_classes, 3);
    EXPECT_EQ(s.base.input.height, 8);
}

TEST(Config, ErrorsNameLineAndKey) {
    auto e = error_of("dataset = cifar10\nbase = resnet-8-16\nepcohs = 10\n");
    EXPECT_NE(e.find("x.cfg:3"), std::string::npos) << e;
    EXPECT_NE(e.find("epcohs"), std::string::npos) << e;
    EXPECT_NE(e.find("unknown key"), std::string::npos) << e;

    auto empty = error_of("");
    EXPECT_NE(empty.find("dataset"), std::string::npos) << empty;
    EXPECT_NE(empty.find("base"), std::string::npos) << empty;

    EXPECT_NE(error_of("dataset = cifar10\nbase = resnet-8-16\nepochs = ten\n").find("x.cfg:3: epochs"), std::string::npos);
    EXPECT_NE(error_of("dataset = cifar10\nbase = resnet-8-16\nbase = resnet-8-16\n").find("duplicate"), std::string::npos);
    EXPECT_NE(error_of("dataset = imagenet\nbase = resnet-8-16\n").find("x.cfg:1: dataset"), std::string::npos);
    EXPECT_NE(error_of("dataset = cifar10\nbase = resnet-9-16\n").find("base"), std::string::npos);
    EXPECT_NE(error_of("dataset = portable\nbase = resnet-8-16\n").find("train_file"), std::string::npos);
    EXPECT_NE(error_of("dataset = cifar10\nbase = resnet-8-16\nmembers = 0\n").find("members"), std::string::npos);
    EXPECT_NE(error_of("dataset = cifar10\nbase = resnet-8-16\nseeds = 1,,2\n").find("seeds"), std::string::npos);
    EXPECT_NE(error_of("dataset = cifar10\nno equals sign\n").find("x.cfg:2"), std::string::npos);
    EXPECT_THROW(parse_config("/nonexistent/file.cfg"), ConfigError);
}
