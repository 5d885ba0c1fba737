#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tss/grad_check.hpp"
#include "tss/transformer.hpp"

using namespace tss;

TEST(Block, ZeroWeightsIsIdentity) {
    CounterRng rng(1, 0);
    Tensor x = Tensor::randn({5, 8}, rng);
    Tensor y = attention_block(x, BlockParams::zeros(8, 2, 4.0));
    EXPECT_EQ(y.value(), x.value());
}

TEST(Block, ShapeContract) {
    CounterRng rng(2, 0);
    BlockParams p = BlockParams::init(8, 2, 4.0, rng);
    for (int64_t s : {1, 5, 17}) {
        Tensor x = Tensor::randn({s, 8}, rng.derive(static_cast<uint64_t>(s)));
        Tensor y = attention_block(x, p);
        EXPECT_EQ(y.shape(), (Shape{s, 8}));
    }
}

TEST(Block, PermutationEquivariantWithoutPositions) {
    CounterRng rng(3, 0);
    BlockParams p = BlockParams::init(8, 2, 4.0, rng);
    Tensor x = Tensor::randn({6, 8}, rng.derive(1));
    std::vector<int64_t> perm = {3, 0, 5, 1, 4, 2};
    Tensor y = attention_block(x, p);
    Tensor yp = attention_block(gather_rows(x, perm), p);
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < 8; ++j) EXPECT_NEAR(yp.at({i, j}), y.at({perm[i], j}), 1e-12);
}

TEST(Block, CausalMaskBlocksFuturePositions) {
    CounterRng rng(4, 0);
    BlockParams p = BlockParams::init(8, 2, 4.0, rng);
    Tensor x = Tensor::randn({5, 8}, rng.derive(1));
    Tensor x2 = x.clone(false);
    x2.mutable_value()[4 * 8 + 3] += 2.0;  // change the last position only
    Tensor y = attention_block(x, p, nullptr, true);
    Tensor y2 = attention_block(x2, p, nullptr, true);
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(y2.at({i, j}), y.at({i, j}));
    bool last_changed = false;
    for (int64_t j = 0; j < 8; ++j) last_changed |= y2.at({4, j}) != y.at({4, j});
    EXPECT_TRUE(last_changed);
}

TEST(Block, AttentionRowsSumToOne) {
    CounterRng rng(5, 0);
    BlockParams p = BlockParams::init(8, 2, 4.0, rng);
    Tensor x = Tensor::randn({7, 8}, rng.derive(1));
    std::vector<double> row_sums;
    attention_probe() = [&](const Tensor& attn) {
        auto sp = detail::axis_span(attn.shape(), 2);
        for (int64_t o = 0; o < sp.outer; ++o) {
            double s = 0;
            for (int64_t l = 0; l < sp.len; ++l) s += attn.value()[o * sp.len + l];
            row_sums.push_back(s);
        }
    };
    attention_block(x, p, nullptr, true);
    attention_probe() = nullptr;
    ASSERT_FALSE(row_sums.empty());
    for (double s : row_sums) EXPECT_NEAR(s, 1.0, 1e-12);
}

namespace {

TextEncoderParams small_text_params(uint64_t seed = 10) {
    return TextEncoderParams::init(/*vocab=*/12, /*max_len=*/6, /*c=*/8, /*heads=*/2,
                                   /*layers=*/2, /*mlp_ratio=*/2.0, CounterRng(seed, 0));
}

}  // namespace

TEST(TextEncoder, MinimalSequenceShape) {
    auto p = small_text_params();
    Tensor q = encode_text(TextBatch::from_sequences({{3}}, 11), p);
    EXPECT_EQ(q.shape(), (Shape{1, 8}));
}

TEST(TextEncoder, IdenticalSequencesIdenticalEmbeddings) {
    auto p = small_text_params();
    Tensor q = encode_text(TextBatch::from_sequences({{1, 2, 5}, {1, 2, 5}}, 11), p);
    for (int64_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(q.at({0, j}), q.at({1, j}));
}

TEST(TextEncoder, PaddingAfterEosDoesNotChangeEmbedding) {
    auto p = small_text_params();
    Tensor tight = encode_text(TextBatch::from_sequences({{1, 2, 5}}, 11, 3), p);
    Tensor padded = encode_text(TextBatch::from_sequences({{1, 2, 5}}, 11, 6), p);
    for (int64_t j = 0; j < 8; ++j) EXPECT_NEAR(padded.at({0, j}), tight.at({0, j}), 1e-9);
}

TEST(TextEncoder, RejectsOutOfVocabularyIds) {
    auto p = small_text_params();
    EXPECT_THROW(encode_text(TextBatch::from_sequences({{12}}, 11), p), ArgumentError);
}

TEST(TextEncoder, TwoBlockGradCheck) {
    auto base = small_text_params(20);
    TextBatch batch = TextBatch::from_sequences({{1, 2, 5}, {7, 3, 4, 6}}, 11);
    // Differentiate a scalar head through a representative parameter subset.
    std::vector<Tensor> inputs = {base.tok_embed, base.blocks[0].wq, base.blocks[1].w2,
                                  base.blocks[0].ln1_gain, base.proj, base.pos_embed};
    auto fn = [&](const std::vector<Tensor>& in) {
        TextEncoderParams p = base;
        p.tok_embed = in[0];
        p.blocks[0].wq = in[1];
        p.blocks[1].w2 = in[2];
        p.blocks[0].ln1_gain = in[3];
        p.proj = in[4];
        p.pos_embed = in[5];
        Tensor q = encode_text(batch, p);
        return sum(mul(q, q));
    };
    auto report = grad_check("text_encoder", fn, inputs, 1e-4);
    EXPECT_TRUE(report.passed) << report.max_rel_error << " " << report.note;
}

TEST(FrameEmbed, ZeroImageZeroProjectionGivesClsPlusPositions) {
    CounterRng rng(30, 0);
    FrameEmbedParams p = FrameEmbedParams::init(4, 6, 8, rng);
    p.patch_proj = Tensor::zeros({6, 8});
    Tensor tokens = embed_frame(Tensor::zeros({4, 6}), p);
    for (int64_t j = 0; j < 8; ++j)
        EXPECT_DOUBLE_EQ(tokens.at({0, j}), p.cls.at({0, j}) + p.pos_embed.at({0, j}));
    for (int64_t i = 1; i <= 4; ++i)
        for (int64_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(tokens.at({i, j}), p.pos_embed.at({i, j}));
}

TEST(FrameEmbed, ClsRowIndependentOfImage) {
    CounterRng rng(31, 0);
    FrameEmbedParams p = FrameEmbedParams::init(4, 6, 8, rng);
    Tensor a = embed_frame(Tensor::randn({4, 6}, rng.derive(1)), p);
    Tensor b = embed_frame(Tensor::randn({4, 6}, rng.derive(2)), p);
    for (int64_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(a.at({0, j}), b.at({0, j}));
}

TEST(FrameEmbed, SinglePatchChangeIsLocalPreAttention) {
    CounterRng rng(32, 0);
    FrameEmbedParams p = FrameEmbedParams::init(4, 6, 8, rng);
    Tensor img = Tensor::randn({4, 6}, rng.derive(1));
    Tensor img2 = img.clone(false);
    for (int64_t d = 0; d < 6; ++d) img2.mutable_value()[2 * 6 + d] += 1.0;  // patch 2
    Tensor a = embed_frame(img, p);
    Tensor b = embed_frame(img2, p);
    for (int64_t i = 0; i <= 4; ++i) {
        bool differs = false;
        for (int64_t j = 0; j < 8; ++j) differs |= a.at({i, j}) != b.at({i, j});
        EXPECT_EQ(differs, i == 3);  // token row 3 = patch 2 (offset by [CLS])
    }
}

TEST(FrameEmbed, PatchCountMismatch) {
    CounterRng rng(33, 0);
    FrameEmbedParams p = FrameEmbedParams::init(4, 6, 8, rng);
    EXPECT_THROW(embed_frame(Tensor::zeros({5, 6}), p), ArgumentError);
}

TEST(Block, HeadShapeMismatchRejected) {
    EXPECT_THROW(BlockParams::init(8, 3, 4.0, CounterRng(0, 0)), ArgumentError);
    CounterRng rng(6, 0);
    BlockParams p = BlockParams::init(8, 2, 4.0, rng);
    EXPECT_THROW(attention_block(Tensor::zeros({5, 6}), p), ArgumentError);
}
