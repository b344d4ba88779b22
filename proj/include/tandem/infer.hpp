#pragma once

#include <string>
#include <vector>

#include "tandem/model.hpp"
#include "tandem/sequence.hpp"
#include "tandem/toy.hpp"
#include "tandem/vocab.hpp"

namespace tandem {

// Constant-memory autoregressive decode: per-layer recurrent states plus a
// position counter.  Prompt ingestion goes through the chunked parallel
// path; everything after is one block_step per token.

template <typename T>
struct DecodeSession {
    const Model<T>* model = nullptr;
    TaskRoute route = TaskRoute::NONE;
    std::vector<LayerState<T>> states;
    int position = 0;
    GenerationConfig gen;
    Rng rng{0};
    std::vector<T> last_hidden;  // post-final-norm state of the latest position

    size_t state_bytes() const {
        size_t n = 0;
        for (const auto& s : states) n += s.byte_size();
        return n;
    }
};

// Folds the prompt into a session.  `prompt` rows are embedded inputs
// ([L x d_model]); callers assemble them via Model::embed_inputs-style
// logic so MMU continuous features slot in unchanged.
template <typename T>
DecodeSession<T> prefill(const Model<T>& model, const T* prompt, int L, TaskRoute route,
                         const GenerationConfig& gen) {
    check(L >= 1, "prefill needs at least the task tag");
    DecodeSession<T> s;
    s.model = &model;
    s.route = route;
    s.gen = gen;
    s.rng = Rng(gen.seed);
    s.last_hidden.resize(size_t(model.cfg.d_model));
    std::vector<T> hidden(size_t(L) * model.cfg.d_model);
    model.forward_parallel(prompt, L, route, 16, hidden.data(), &s.states);
    s.position = L;
    std::copy(hidden.end() - model.cfg.d_model, hidden.end(), s.last_hidden.begin());
    return s;
}

// Advances the session by one already-chosen token.
template <typename T>
void session_step(DecodeSession<T>& s, const Token& tok) {
    const T* emb = s.model->heads.embed(tok);
    s.model->step(s.states, emb, s.route, s.last_hidden.data());
    s.position++;
}

// MMU: [MMU][SOI]{features}[EOI][SOT]{question} -> greedy/sampled text ids
// until [EOT] or the budget runs out.
template <typename T>
std::vector<int> generate_text(const Model<T>& model, const ToyImage& img,
                               const std::vector<int>& question_tokens,
                               const GenerationConfig& gen) {
    std::vector<T> feats = model.vision.encode(img);
    std::vector<T> prefix(size_t(GRID_CELLS) * model.cfg.d_model);
    model.projector.apply(feats.data(), GRID_CELLS, prefix.data());

    // prompt = everything before the first generated position
    std::vector<Token> toks;
    toks.push_back(Token::special(SP_MMU));
    toks.push_back(Token::special(SP_SOI));
    int cont_start = (int)toks.size();
    for (int i = 0; i < GRID_CELLS; i++) toks.push_back(Token::image(0));
    toks.push_back(Token::special(SP_EOI));
    toks.push_back(Token::special(SP_SOT));
    for (int q : question_tokens) toks.push_back(Token::text(q));

    int L = (int)toks.size();
    std::vector<T> prompt(size_t(L) * model.cfg.d_model);
    for (int t = 0; t < L; t++) {
        const T* src = (t >= cont_start && t < cont_start + GRID_CELLS)
                           ? prefix.data() + size_t(t - cont_start) * model.cfg.d_model
                           : model.heads.embed(toks[size_t(t)]);
        std::copy(src, src + model.cfg.d_model, prompt.data() + size_t(t) * model.cfg.d_model);
    }

    auto session = prefill(model, prompt.data(), L, TaskRoute::MMU, gen);
    std::vector<int> out;
    for (int i = 0; i < gen.max_new_tokens; i++) {
        Token t = model.shared_vocab
                      ? decode_unconstrained(model.heads, session.last_hidden.data(),
                                             gen, session.rng)
                      : decode_constrained(model.heads, session.last_hidden.data(),
                                           Expected::TEXT_OR_EOT, gen, session.rng);
        if (t.is_special(SP_EOT)) break;
        if (t.modality != Modality::Text) break;  // shared-vocab mode can derail
        out.push_back(t.id);
        session_step(session, t);
    }
    return out;
}

struct ImageGenResult {
    std::vector<Token> tokens;   // exactly max_image_tokens entries
    int cross_modal_count = 0;   // shared-vocab mode: non-image emissions
    bool valid_grid = false;
    ToyImage grid;
};

// T2I: [T2I][SOT]{caption}[EOT][SOI] -> exactly max_image_tokens positions.
// Decoupled mode masks [EOI] until the full budget is emitted, then the
// terminator is structural.  Shared mode samples the fused table freely and
// records how often it leaves the image vocabulary.
template <typename T>
ImageGenResult generate_image(const Model<T>& model, const std::vector<int>& caption_tokens,
                              const GenerationConfig& gen, const Codebook& codebook) {
    std::vector<Token> toks;
    toks.push_back(Token::special(SP_T2I));
    toks.push_back(Token::special(SP_SOT));
    for (int c : caption_tokens) toks.push_back(Token::text(c));
    toks.push_back(Token::special(SP_EOT));
    toks.push_back(Token::special(SP_SOI));

    int L = (int)toks.size();
    std::vector<T> prompt(size_t(L) * model.cfg.d_model);
    for (int t = 0; t < L; t++) {
        const T* src = model.heads.embed(toks[size_t(t)]);
        std::copy(src, src + model.cfg.d_model, prompt.data() + size_t(t) * model.cfg.d_model);
    }

    auto session = prefill(model, prompt.data(), L, TaskRoute::T2I, gen);
    ImageGenResult res;
    int budget = model.cfg.max_image_tokens;
    for (int i = 0; i < budget; i++) {
        Token t;
        if (model.shared_vocab) {
            t = decode_unconstrained(model.heads, session.last_hidden.data(), gen,
                                     session.rng);
            if (t.modality != Modality::Image) {
                res.cross_modal_count++;
                // grid slot is unfillable; substitute token 0 to keep the
                // stream advancing (counted as a miss by the evaluator)
                Token sub = Token::image(0);
                res.tokens.push_back(t);
                session_step(session, sub);
                continue;
            }
        } else {
            // [EOI] is not permitted before the full grid is emitted: the
            // image head may still rank it highest, so argmax/sampling run
            // over image rows only
            GenerationConfig g = gen;
            const Mat<T>& head = model.heads.image_head;
            std::vector<T> logits(size_t(head.rows));
            matvec(logits.data(), head.w.data(), session.last_hidden.data(), head.rows,
                   head.cols);
            logits.resize(size_t(model.heads.image_vocab));  // drop the [EOI] row
            t = Token::image(detail::pick_from_logits(logits, g, session.rng));
        }
        res.tokens.push_back(t);
        session_step(session, t);
    }

    // all-image streams detokenize; shared-mode derailments do not
    bool all_img = true;
    for (auto& t : res.tokens)
        all_img &= (t.modality == Modality::Image && t.id < codebook.vocab &&
                    t.id < PALETTE_K);
    if (all_img) {
        res.grid = codebook.detokenize(res.tokens);
        res.valid_grid = true;
    }
    return res;
}

// ---- evaluation -------------------------------------------------------------

struct EvalReport {
    int n_mmu = 0, mmu_exact = 0;
    int n_t2i = 0, t2i_exact = 0;
    int cross_modal_tokens = 0;  // shared-vocab mode only
    double mmu_em() const { return n_mmu ? double(mmu_exact) / n_mmu : 0.0; }
    double t2i_em() const { return n_t2i ? double(t2i_exact) / n_t2i : 0.0; }
};

// Both tasks are scored on every record: caption exact match for MMU,
// grid exact match for T2I.
template <typename T>
EvalReport evaluate(const Model<T>& model, const TextTokenizer& tok,
                    const std::vector<DataRecord>& records, const GenerationConfig& gen) {
    Codebook codebook(model.cfg.image_vocab_size);
    std::vector<int> question = tok.encode(MMU_QUESTION);
    EvalReport rep;
    for (const auto& rec : records) {
        {
            rep.n_mmu++;
            std::vector<int> ids = generate_text(model, rec.grid, question, gen);
            bool ok = true;
            try {
                ok = (tok.decode(ids) == rec.caption);
            } catch (const std::exception&) {
                ok = false;
            }
            rep.mmu_exact += ok ? 1 : 0;
        }
        {
            rep.n_t2i++;
            auto res = generate_image(model, tok.encode(rec.caption), gen, codebook);
            rep.cross_modal_tokens += res.cross_modal_count;
            rep.t2i_exact += (res.valid_grid && res.grid == rec.grid) ? 1 : 0;
        }
    }
    return rep;
}

}  // namespace tandem
