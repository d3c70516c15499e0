# Periscope: metric periocular depth estimation
