#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace crackseg;
namespace fs = std::filesystem;

namespace {

Checkpoint sample_checkpoint() {
    UNetConfig c;
    c.input_size = 16;
    c.base_filters = 2;
    c.depth = 2;
    c.dropout_stages = std::set<std::string>{"bridge"};
    Rng rng(5);
    const auto p = build<float>(c, rng);
    Checkpoint ck;
    ck.model = c;
    ck.meta = {{"epoch", 3}, {"note", "x"}};
    put_params(ck, p);
    auto st = AdamState<float>::zeros_like(p);
    st.t = 12345;
    st.m[0].value[0] = -0.25f;
    put_adam(ck, st);
    ck.put("norm.mean", Tensor<float>({3}, {0.1f, 0.2f, 0.3f}));
    return ck;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto ck = sample_checkpoint();
    const auto dir = testutil::temp_dir("ckpt");
    save_checkpoint(dir / "a.cseg", ck);
    const auto back = load_checkpoint(dir / "a.cseg");
    EXPECT_EQ(back.model, ck.model);
    EXPECT_EQ(back.meta, ck.meta);
    ASSERT_EQ(back.tensors.size(), ck.tensors.size());
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
        EXPECT_EQ(back.tensors[i].key, ck.tensors[i].key);
        EXPECT_EQ(back.tensors[i].value, ck.tensors[i].value);
    }
    save_checkpoint(dir / "b.cseg", back);
    EXPECT_EQ(read_bytes(dir / "a.cseg"), read_bytes(dir / "b.cseg"));

    const auto p = get_params(back);
    EXPECT_TRUE(p == get_params(ck));
    const auto st = get_adam(back, p);
    EXPECT_EQ(st.t, 12345u);
    EXPECT_EQ(st.m[0].value[0], -0.25f);
}

TEST(Checkpoint, LayoutStartsWithMagicAndVersion) {
    const std::string bytes = encode_checkpoint(sample_checkpoint());
    ASSERT_GT(bytes.size(), 8u);
    EXPECT_EQ(bytes.substr(0, 4), "CSEG");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5], 0);
    EXPECT_EQ(bytes[6], 0);
    EXPECT_EQ(bytes[7], 0);
}

TEST(Checkpoint, CorruptedMagicNamesTheFile) {
    const auto dir = testutil::temp_dir("ckpt_bad");
    std::string bytes = encode_checkpoint(sample_checkpoint());
    bytes[0] = 'X';
    {
        std::ofstream f(dir / "broken.cseg", std::ios::binary);
        f << bytes;
    }
    try {
        load_checkpoint(dir / "broken.cseg");
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("broken.cseg"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
    }
}

TEST(Checkpoint, TruncationAndTrailingBytes) {
    const std::string bytes = encode_checkpoint(sample_checkpoint());
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
    EXPECT_THROW(decode_checkpoint(bytes + "zz"), CheckpointError);
    EXPECT_THROW(load_checkpoint("/nonexistent/model.cseg"), CheckpointError);
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
    auto ck = sample_checkpoint();
    ck.model.base_filters = 3;
    EXPECT_THROW(get_params(ck), CheckpointError);
    EXPECT_THROW(sample_checkpoint().get("missing"), CheckpointError);
}
