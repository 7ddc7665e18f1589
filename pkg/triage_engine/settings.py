# =============================================================================
# DEFAULT PARAMETERS (overridden by a key=value config file, then the CLI)
# =============================================================================
# ENTROPY FEATURES
SEGMENT_LEN = 200  # bytes per entropy segment
GRAPH_SIZE = 224  # side of the square entropy graph (pixels)
GRAPH_MEAN = 0.52206  # pixel mean used by normalize_graph
GRAPH_STD = 0.08426  # pixel std used by normalize_graph
AUGMENT_MIN = 30  # classes below this many samples get rotations then rescale-crops
RESCALE_MAX = 1.25  # largest zoom factor of the rescale-crop augmentation
# EMBEDDER ARCHITECTURE
CHANNELS = [8, 16, 16, 32]  # output channels of the 4 conv blocks
INPUT_POOL = 4  # average-pool factor applied to the graph before conv0
HIDDEN_DIM = 128  # width of the hidden dense layer (h1)
EMBED_DIM = 64  # embedding width (d)
TRAINABLE_FROM = 'conv3'  # first parameter group left trainable during episodic training
INFERENCE_FLOAT32 = False  # run embed() in 32-bit (training always 64-bit)
# OPTIMISATION
LEARNING_RATE = 0.001  # outer (adaptive-moment) learning rate a
TASK_RATE = 0.01  # task-level learning rate alpha of the inner update
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BATCH_SIZE = 64  # pretraining mini-batch size
EPOCHS = 50  # pretraining epochs
EPISODES = 20000  # episodes per meta-train run and per evaluation cell
# EPISODES
WAY = 5
SHOT = 1
QUERY_1SHOT = 19  # query items per class in 1-shot episodes
QUERY_5SHOT = 15  # query items per class in 5-shot episodes
# TASK MEMORY
TAU = 0.5  # blend between adaptive prototype and raw embedding
QUERY_BLEND = 'class'  # 'class': query blended per candidate prototype, 'readout': own readout
MEMORY_SEED = 'episode'  # 'episode' or 'base' (base-class slots added for 1-shot tasks)
CLASSIFIER = 'memory'  # meta-test classifier: 'memory' or 'head'
INNER_STEPS = 0  # first-order head updates on the support set ('head' classifier)
# TRIAGE
TRIAGE_K = 20  # neighbours returned by the reference index
TRIAGE_THRESHOLD = 0.6  # minimum weight ratio for a class verdict
SWEEP_THRESHOLDS = [0.50, 0.45, 0.40, 0.30]
LIME_LAMBDA = 0.1  # regularisation of the simplex weights
LIME_PRINTED_SIGN = False  # use the concentration-rewarding sign (comparison only)
LIME_TOL = 1e-8
LIME_MAX_ITER = 10000
RATIO_SOURCE = 'rank'  # 'rank' or 'lime'
# HARNESS
SEED = None  # global seed; falls back to TRIAGE_ENGINE_SEED, then 0
SPLIT_SEED = None  # None keeps the lexicographic class split
WORKERS = 1  # evaluation threads
